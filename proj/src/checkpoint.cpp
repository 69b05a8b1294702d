#include "ctn/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "ctn/serialize.hpp"

namespace ctn {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoints assume a little-endian host");
static_assert(sizeof(float) == 4);

namespace {

constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

int decode_char(char c) {
  if (c >= 'A' && c <= 'Z') return c - 'A';
  if (c >= 'a' && c <= 'z') return c - 'a' + 26;
  if (c >= '0' && c <= '9') return c - '0' + 52;
  if (c == '+') return 62;
  if (c == '/') return 63;
  return -1;
}

const char* kFormat = "ctn3d-checkpoint";

}  // namespace

std::string base64_encode(std::span<const float> values) {
  const auto* bytes = reinterpret_cast<const unsigned char*>(values.data());
  const std::size_t n = values.size() * sizeof(float);
  std::string out;
  out.reserve((n + 2) / 3 * 4);
  for (std::size_t i = 0; i < n; i += 3) {
    const std::uint32_t b0 = bytes[i];
    const std::uint32_t b1 = i + 1 < n ? bytes[i + 1] : 0;
    const std::uint32_t b2 = i + 2 < n ? bytes[i + 2] : 0;
    const std::uint32_t word = (b0 << 16) | (b1 << 8) | b2;
    out += kAlphabet[(word >> 18) & 63];
    out += kAlphabet[(word >> 12) & 63];
    out += i + 1 < n ? kAlphabet[(word >> 6) & 63] : '=';
    out += i + 2 < n ? kAlphabet[word & 63] : '=';
  }
  return out;
}

std::vector<float> base64_decode(const std::string& text) {
  if (text.size() % 4 != 0) throw std::runtime_error("base64: length not a multiple of 4");
  std::vector<unsigned char> bytes;
  bytes.reserve(text.size() / 4 * 3);
  for (std::size_t i = 0; i < text.size(); i += 4) {
    int v[4];
    std::size_t pad = 0;
    for (int k = 0; k < 4; ++k) {
      const char c = text[i + k];
      if (c == '=' && i + 4 == text.size() && k >= 2) {
        v[k] = 0;
        ++pad;
        continue;
      }
      if (pad) throw std::runtime_error("base64: data after padding");
      v[k] = decode_char(c);
      if (v[k] < 0) throw std::runtime_error("base64: invalid character");
    }
    const std::uint32_t word = (std::uint32_t(v[0]) << 18) | (std::uint32_t(v[1]) << 12) |
                               (std::uint32_t(v[2]) << 6) | std::uint32_t(v[3]);
    bytes.push_back(static_cast<unsigned char>(word >> 16));
    if (pad < 2) bytes.push_back(static_cast<unsigned char>(word >> 8));
    if (pad < 1) bytes.push_back(static_cast<unsigned char>(word));
  }
  if (bytes.size() % sizeof(float) != 0) throw std::runtime_error("base64: payload is not whole float32 values");
  std::vector<float> out(bytes.size() / sizeof(float));
  std::memcpy(out.data(), bytes.data(), bytes.size());
  return out;
}

Checkpoint make_checkpoint(const Model<float>& model, std::vector<std::string> class_names, const TrainConfig& train,
                           const TrainState& state) {
  Checkpoint c;
  c.config = model.config();
  c.class_names = std::move(class_names);
  c.train = train;
  c.state = state;
  for (const auto& [name, t] : model.store().params()) {
    c.params[name] = {t.shape(), std::vector<float>(t.data().begin(), t.data().end())};
  }
  c.norms = model.store().norms();
  return c;
}

Model<float> restore_model(const Checkpoint& checkpoint) {
  Model<float> model(checkpoint.config, checkpoint.state.seed);
  auto& params = model.store().params();
  if (params.size() != checkpoint.params.size()) {
    throw std::runtime_error("checkpoint holds " + std::to_string(checkpoint.params.size()) +
                             " tensors, model expects " + std::to_string(params.size()));
  }
  for (auto& [name, t] : params) {
    const auto it = checkpoint.params.find(name);
    if (it == checkpoint.params.end()) throw std::runtime_error("checkpoint lacks parameter " + name);
    if (it->second.shape != t.shape() || it->second.values.size() != t.size()) {
      throw std::runtime_error("checkpoint parameter " + name + " has shape " + shape_str(it->second.shape) +
                               ", model expects " + shape_str(t.shape()));
    }
    std::copy(it->second.values.begin(), it->second.values.end(), t.mutable_data().begin());
  }
  for (auto& [name, state] : model.store().norms()) {
    const auto it = checkpoint.norms.find(name);
    if (it == checkpoint.norms.end()) throw std::runtime_error("checkpoint lacks batchnorm " + name);
    if (it->second.running_mean.size() != state.running_mean.size() ||
        it->second.running_var.size() != state.running_var.size()) {
      throw std::runtime_error("checkpoint batchnorm " + name + " has the wrong channel count");
    }
    state = it->second;
  }
  return model;
}

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  json params = json::object();
  for (const auto& [name, t] : c.params) params[name] = {{"shape", t.shape}, {"data", base64_encode(t.values)}};
  json norms = json::object();
  for (const auto& [name, s] : c.norms) {
    norms[name] = {{"running_mean", base64_encode(s.running_mean)},
                   {"running_var", base64_encode(s.running_var)},
                   {"momentum", s.momentum},
                   {"eps", s.eps}};
  }
  json velocity = json::object();
  for (const auto& [name, v] : c.state.velocity) velocity[name] = base64_encode(v);
  const json doc{{"format", kFormat},
                 {"version", 1},
                 {"config", c.config},
                 {"class_names", c.class_names},
                 {"train", c.train},
                 {"epoch", c.state.epoch},
                 {"seed", c.state.seed},
                 {"rng_state", c.state.rng_state},
                 {"optimizer", {{"velocity", velocity}}},
                 {"params", params},
                 {"norms", norms}};
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << doc.dump() << '\n';
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const json doc = read_json(path);
  try {
    if (doc.value("format", "") != kFormat) throw std::runtime_error("not a checkpoint");
    Checkpoint c;
    doc.at("config").get_to(c.config);
    doc.at("class_names").get_to(c.class_names);
    doc.at("train").get_to(c.train);
    doc.at("epoch").get_to(c.state.epoch);
    doc.at("seed").get_to(c.state.seed);
    doc.at("rng_state").get_to(c.state.rng_state);
    for (const auto& [name, v] : doc.at("optimizer").at("velocity").items()) {
      c.state.velocity[name] = base64_decode(v.get<std::string>());
    }
    for (const auto& [name, t] : doc.at("params").items()) {
      StoredTensor stored{t.at("shape").get<Shape>(), base64_decode(t.at("data").get<std::string>())};
      if (shape_numel(stored.shape) != stored.values.size()) {
        throw std::runtime_error("parameter " + name + " data does not fill its shape");
      }
      c.params[name] = std::move(stored);
    }
    for (const auto& [name, s] : doc.at("norms").items()) {
      BatchNormState<float> state;
      state.running_mean = base64_decode(s.at("running_mean").get<std::string>());
      state.running_var = base64_decode(s.at("running_var").get<std::string>());
      s.at("momentum").get_to(state.momentum);
      s.at("eps").get_to(state.eps);
      c.norms[name] = std::move(state);
    }
    return c;
  } catch (const json::exception& e) {
    throw std::runtime_error(path.string() + ": malformed checkpoint: " + e.what());
  } catch (const std::runtime_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

}  // namespace ctn
