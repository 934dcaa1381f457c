#include "osf/epoch.hpp"

#include <bit>
#include <cstring>

#include "osf/util.hpp"

namespace osf {

using nlohmann::json;

namespace {

void put_u16(std::ostream& os, uint16_t v) {
  char b[2] = {char(v & 0xff), char(v >> 8)};
  os.write(b, 2);
}
void put_u32(std::ostream& os, uint32_t v) {
  char b[4] = {char(v & 0xff), char((v >> 8) & 0xff), char((v >> 16) & 0xff), char(v >> 24)};
  os.write(b, 4);
}
uint16_t get_u16(const unsigned char* p) { return uint16_t(p[0] | (p[1] << 8)); }
uint32_t get_u32(const unsigned char* p) {
  return uint32_t(p[0]) | (uint32_t(p[1]) << 8) | (uint32_t(p[2]) << 16) | (uint32_t(p[3]) << 24);
}

void write_record(std::ostream& os, const Epoch& e) {
  if (e.values.rows() != kNumChannels || e.values.cols() != kEpochSamples)
    throw std::invalid_argument("epoch values must be 12x1920");
  static_assert(std::endian::native == std::endian::little,
                "shard writer assumes a little-endian host");
  os.write(reinterpret_cast<const char*>(e.values.data()), kShardValueBytes);
  uint16_t mask = 0;
  for (int c = 0; c < kNumChannels; ++c)
    if (e.channel_valid[c]) mask |= uint16_t(1) << c;
  put_u16(os, mask);
  os.put(char(static_cast<uint8_t>(e.stage)));
  uint8_t ev = 0;
  for (int i = 0; i < kNumEventTypes; ++i)
    if (e.event_flags[i]) ev |= uint8_t(1) << i;
  os.put(char(ev));
  os.write(reinterpret_cast<const char*>(&e.hr_bpm), 4);
  put_u32(os, e.patient_id);
  put_u16(os, e.night_index);
}

Epoch parse_record(const unsigned char* p, const std::map<uint32_t, std::string>& cohorts) {
  Epoch e;
  e.values.resize(kNumChannels, kEpochSamples);
  std::memcpy(e.values.data(), p, kShardValueBytes);
  p += kShardValueBytes;
  uint16_t mask = get_u16(p);
  p += 2;
  for (int c = 0; c < kNumChannels; ++c) e.channel_valid[c] = (mask >> c) & 1;
  e.stage = static_cast<SleepStage>(*p++);
  uint8_t ev = *p++;
  for (int i = 0; i < kNumEventTypes; ++i) e.event_flags[i] = (ev >> i) & 1;
  std::memcpy(&e.hr_bpm, p, 4);
  p += 4;
  e.patient_id = get_u32(p);
  p += 4;
  e.night_index = get_u16(p);
  auto it = cohorts.find(e.patient_id);
  if (it != cohorts.end()) e.cohort_id = it->second;
  return e;
}

}  // namespace

ShardWriter::ShardWriter(const std::filesystem::path& path, const std::string& split_tag)
    : path_(path), tmp_path_(path.string() + ".payload.tmp"), split_tag_(split_tag) {
  payload_.open(tmp_path_, std::ios::binary | std::ios::trunc);
  if (!payload_) throw std::runtime_error("cannot open " + tmp_path_.string());
}

ShardWriter::~ShardWriter() {
  try {
    close();
  } catch (...) {
  }
}

void ShardWriter::append(const Epoch& e) {
  if (closed_) throw std::logic_error("shard already closed");
  write_record(payload_, e);
  if (!payload_) throw std::runtime_error("shard payload write failed");
  stages_.push_back(static_cast<uint8_t>(e.stage));
  patient_ids_.push_back(e.patient_id);
  uint8_t ev = 0;
  for (int i = 0; i < kNumEventTypes; ++i)
    if (e.event_flags[i]) ev |= uint8_t(1) << i;
  event_bits_.push_back(ev);
  if (!e.cohort_id.empty()) patient_cohorts_[e.patient_id] = e.cohort_id;
  ++count_;
}

void ShardWriter::close() {
  if (closed_) return;
  closed_ = true;
  payload_.close();

  json manifest;
  manifest["count"] = count_;
  manifest["split"] = split_tag_;
  manifest["dtype"] = "f32le";
  manifest["shape"] = {kNumChannels, kEpochSamples};
  manifest["stages"] = stages_;
  manifest["patient_ids"] = patient_ids_;
  manifest["event_bits"] = event_bits_;
  json pc = json::object();
  for (const auto& [pid, cid] : patient_cohorts_) pc[std::to_string(pid)] = cid;
  manifest["patient_cohorts"] = pc;
  std::string mtext = manifest.dump();

  std::ofstream out(path_, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path_.string());
  out.write(kShardMagic, 4);
  put_u16(out, kShardVersion);
  put_u32(out, static_cast<uint32_t>(count_));
  put_u32(out, static_cast<uint32_t>(mtext.size()));
  out.write(mtext.data(), static_cast<std::streamsize>(mtext.size()));

  std::ifstream in(tmp_path_, std::ios::binary);
  out << in.rdbuf();
  in.close();
  out.close();
  if (!out) throw std::runtime_error("shard finalize failed: " + path_.string());
  std::filesystem::remove(tmp_path_);
}

void write_shard(const std::vector<Epoch>& epochs, const std::filesystem::path& path,
                 const std::string& split_tag) {
  ShardWriter w(path, split_tag);
  for (const auto& e : epochs) w.append(e);
  w.close();
}

ShardReader::ShardReader(const std::filesystem::path& path) : path_(path) {
  file_.open(path, std::ios::binary);
  if (!file_) throw std::runtime_error("cannot open shard " + path.string());
  unsigned char head[14];
  file_.read(reinterpret_cast<char*>(head), 14);
  if (!file_) throw std::runtime_error("shard truncated header: " + path.string());
  if (std::memcmp(head, kShardMagic, 4) != 0)
    throw std::runtime_error("bad shard magic in " + path.string());
  uint16_t version = get_u16(head + 4);
  if (version != kShardVersion)
    throw std::runtime_error("unsupported shard version " + std::to_string(version));
  count_ = get_u32(head + 6);
  uint32_t mlen = get_u32(head + 10);
  std::string mtext(mlen, '\0');
  file_.read(mtext.data(), mlen);
  if (!file_) throw std::runtime_error("shard truncated manifest: " + path.string());
  manifest_ = json::parse(mtext);
  payload_offset_ = 14 + mlen;

  if (manifest_.at("count").get<size_t>() != count_)
    throw std::runtime_error("shard manifest/header count mismatch in " + path.string());
  stages_ = manifest_.at("stages").get<std::vector<uint8_t>>();
  patient_ids_ = manifest_.at("patient_ids").get<std::vector<uint32_t>>();
  event_bits_ = manifest_.at("event_bits").get<std::vector<uint8_t>>();
  if (stages_.size() != count_ || patient_ids_.size() != count_)
    throw std::runtime_error("shard manifest label arrays disagree with count");
  for (auto& [k, v] : manifest_.at("patient_cohorts").items())
    patient_cohorts_[static_cast<uint32_t>(std::stoul(k))] = v.get<std::string>();

  file_.seekg(0, std::ios::end);
  auto file_size = static_cast<size_t>(file_.tellg());
  if (file_size != payload_offset_ + count_ * kShardRecordBytes)
    throw std::runtime_error("shard payload size mismatch (corrupt or truncated): " +
                             path.string());
}

Epoch ShardReader::read(size_t i) const {
  if (i >= count_) throw std::out_of_range("shard record index");
  std::vector<unsigned char> buf(kShardRecordBytes);
  file_.seekg(static_cast<std::streamoff>(payload_offset_ + i * kShardRecordBytes));
  file_.read(reinterpret_cast<char*>(buf.data()), kShardRecordBytes);
  if (!file_) throw std::runtime_error("shard read failed at record " + std::to_string(i));
  return parse_record(buf.data(), patient_cohorts_);
}

std::vector<Epoch> read_shard(const std::filesystem::path& path) {
  ShardReader r(path);
  std::vector<Epoch> out;
  out.reserve(r.size());
  for (size_t i = 0; i < r.size(); ++i) out.push_back(r.read(i));
  return out;
}

}  // namespace osf
