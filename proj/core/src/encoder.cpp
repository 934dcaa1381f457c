#include "osf/encoder.hpp"

#include <fstream>

#include "osf/util.hpp"

namespace osf {

using nlohmann::json;

EncoderConfig EncoderConfig::from_preset(const std::string& name) {
  EncoderConfig c;
  c.preset = name;
  if (name == "tiny") {
    c.width = 64; c.depth = 2; c.heads = 4; c.mlp_dim = 256;
  } else if (name == "vit-1m") {
    c.width = 128; c.depth = 6; c.heads = 4; c.mlp_dim = 512;
  } else if (name == "vit-5m") {
    c.width = 192; c.depth = 12; c.heads = 3; c.mlp_dim = 768;
  } else if (name == "vit-85m") {
    c.width = 768; c.depth = 12; c.heads = 12; c.mlp_dim = 3072;
  } else {
    throw std::invalid_argument("unknown encoder preset: " + name);
  }
  return c;
}

void validate(const EncoderConfig& c) {
  if (c.width < 1 || c.depth < 1 || c.heads < 1 || c.mlp_dim < 1)
    throw std::invalid_argument("encoder config: dimensions must be positive");
  if (c.width % c.heads != 0)
    throw std::invalid_argument("encoder config: width must be divisible by heads");
  if (c.token_window < 1 || kEpochSamples % c.token_window != 0)
    throw std::invalid_argument("encoder config: token_window must divide 1920");
  if (c.projection_dim < 1)
    throw std::invalid_argument("encoder config: projection_dim must be positive");
}

void to_json(json& j, const EncoderConfig& c) {
  j = {{"width", c.width},         {"depth", c.depth},
       {"heads", c.heads},         {"mlp_dim", c.mlp_dim},
       {"token_window", c.token_window}, {"projection_dim", c.projection_dim},
       {"preset", c.preset}};
}

void from_json(const json& j, EncoderConfig& c) {
  if (j.is_string()) {
    c = EncoderConfig::from_preset(j.get<std::string>());
    return;
  }
  if (j.contains("preset") && j.size() == 1) {
    c = EncoderConfig::from_preset(j["preset"].get<std::string>());
    return;
  }
  c.width = j.at("width").get<int>();
  c.depth = j.at("depth").get<int>();
  c.heads = j.at("heads").get<int>();
  c.mlp_dim = j.at("mlp_dim").get<int>();
  c.token_window = j.value("token_window", 64);
  c.projection_dim = j.value("projection_dim", 128);
  c.preset = j.value("preset", "custom");
  validate(c);
}

long param_count(const EncoderConfig& c) {
  validate(c);
  const long d = c.width, m = c.mlp_dim, tw = c.token_window;
  long count = tw * d + d;                                // tokenizer conv
  count += (kNumChannels + c.windows_per_channel() + 1) * d;  // channel/time/CLS embeddings
  long per_block = 2 * d                    // ln1
                   + 4 * (d * d + d)        // q, k, v, o
                   + 2 * d                  // ln2
                   + d * m + m + m * d + d; // mlp
  count += c.depth * per_block;
  count += 2 * d;  // final ln
  return count;
}

void save_checkpoint(const std::filesystem::path& dir, const EncoderConfig& cfg,
                     EncoderWeights<float>& weights, const CheckpointMeta& meta) {
  std::filesystem::create_directories(dir);
  json index = json::array();
  std::ofstream bin(dir / "weights.bin", std::ios::binary | std::ios::trunc);
  if (!bin) throw std::runtime_error("cannot write " + (dir / "weights.bin").string());
  size_t offset = 0;
  for (auto& [name, p] : weights.params) {
    index.push_back({{"name", name},
                     {"shape", {p.value.rows(), p.value.cols()}},
                     {"offset", offset}});
    bin.write(reinterpret_cast<const char*>(p.value.data()),
              static_cast<std::streamsize>(p.value.size() * sizeof(float)));
    offset += p.value.size() * sizeof(float);
  }
  bin.close();
  if (!bin) throw std::runtime_error("checkpoint write failed");

  json j;
  j["config"] = cfg;
  j["objective"] = meta.objective;
  j["steps"] = meta.steps;
  j["seed"] = meta.seed;
  j["corpus_hash"] = meta.corpus_hash;
  j["index_version"] = 1;
  j["weights_index"] = index;
  write_text_file(dir / "config.json", j.dump(2) + "\n");
}

Encoder<float> load_checkpoint(const std::filesystem::path& dir, CheckpointMeta* meta_out) {
  json j = json::parse(read_text_file(dir / "config.json"));
  EncoderConfig cfg = j.at("config").get<EncoderConfig>();
  if (meta_out) {
    meta_out->objective = j.value("objective", "");
    meta_out->steps = j.value("steps", 0L);
    meta_out->seed = j.value("seed", uint64_t{0});
    meta_out->corpus_hash = j.value("corpus_hash", "");
  }
  Encoder<float> enc = Encoder<float>::init(cfg, 0);

  std::ifstream bin(dir / "weights.bin", std::ios::binary);
  if (!bin) throw std::runtime_error("cannot read " + (dir / "weights.bin").string());
  for (const auto& entry : j.at("weights_index")) {
    std::string name = entry.at("name").get<std::string>();
    long rows = entry.at("shape")[0].get<long>();
    long cols = entry.at("shape")[1].get<long>();
    size_t offset = entry.at("offset").get<size_t>();
    auto& p = enc.weights.at(name);
    if (p.value.rows() != rows || p.value.cols() != cols)
      throw std::runtime_error("checkpoint weight " + name + " has shape " +
                               std::to_string(rows) + "x" + std::to_string(cols) +
                               ", config requires " + std::to_string(p.value.rows()) + "x" +
                               std::to_string(p.value.cols()));
    bin.seekg(static_cast<std::streamoff>(offset));
    bin.read(reinterpret_cast<char*>(p.value.data()),
             static_cast<std::streamsize>(rows * cols * sizeof(float)));
    if (!bin) throw std::runtime_error("checkpoint payload truncated at " + name);
  }
  return enc;
}

}  // namespace osf
