#include "ctn/serialize.hpp"

#include <fstream>
#include <stdexcept>

namespace ctn {

using nlohmann::json;

namespace {

// Missing keys keep their defaults, so a config file may be partial.
template <typename V>
void read(const json& j, const char* key, V& value) {
  if (auto it = j.find(key); it != j.end()) it->get_to(value);
}

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const char* where) {
  if (!j.is_object()) throw std::invalid_argument(std::string(where) + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    bool known = false;
    for (const char* k : keys) known = known || key == k;
    if (!known) throw std::invalid_argument(std::string(where) + ": unknown key '" + key + "'");
  }
}

}  // namespace

void to_json(json& j, const ModelOptions& o) {
  j = json{{"points", o.points},
           {"classes", o.classes},
           {"scales", o.scales},
           {"mechanism", mechanism_name(o.mechanism)},
           {"operator", operator_name(o.op)},
           {"pos_enc", o.position_encoding},
           {"hierarchy", o.hierarchy},
           {"lfa", o.lfa},
           {"gfl", o.gfl}};
}

void from_json(const json& j, ModelOptions& o) {
  reject_unknown(j, {"points", "classes", "scales", "mechanism", "operator", "pos_enc", "hierarchy", "lfa", "gfl"},
                 "model");
  read(j, "points", o.points);
  read(j, "classes", o.classes);
  read(j, "scales", o.scales);
  if (j.contains("mechanism")) o.mechanism = parse_mechanism(j.at("mechanism").get<std::string>());
  if (j.contains("operator")) o.op = parse_operator(j.at("operator").get<std::string>());
  read(j, "pos_enc", o.position_encoding);
  read(j, "hierarchy", o.hierarchy);
  read(j, "lfa", o.lfa);
  read(j, "gfl", o.gfl);
}

void to_json(json& j, const ModelConfig& c) {
  json modules = json::array();
  for (const auto& m : c.modules) {
    json scales = json::array();
    for (const auto& s : m.lfa.grouping.scales) scales.push_back({{"radius", s.radius}, {"members", s.members}});
    modules.push_back({{"samples", m.samples},
                       {"scales", scales},
                       {"widths", m.lfa.widths},
                       {"lfa", m.lfa_enabled},
                       {"gfl", m.gfl_enabled},
                       {"mechanism", mechanism_name(m.attention.mechanism)},
                       {"operator", operator_name(m.attention.op)},
                       {"pos_enc", m.attention.position_encoding},
                       {"width", m.attention.width},
                       {"map_hidden", m.attention.map_hidden}});
  }
  j = json{{"points", c.points},          {"classes", c.classes},   {"input_features", c.input_features},
           {"modules", modules},          {"embed_width", c.embed_width}, {"head_widths", c.head_widths}};
}

void from_json(const json& j, ModelConfig& c) {
  c = ModelConfig{};
  j.at("points").get_to(c.points);
  j.at("classes").get_to(c.classes);
  j.at("input_features").get_to(c.input_features);
  j.at("embed_width").get_to(c.embed_width);
  j.at("head_widths").get_to(c.head_widths);
  for (const auto& m : j.at("modules")) {
    ModuleConfig mod;
    m.at("samples").get_to(mod.samples);
    for (const auto& s : m.at("scales")) {
      mod.lfa.grouping.scales.push_back({s.at("radius").get<double>(), s.at("members").get<std::size_t>()});
    }
    m.at("widths").get_to(mod.lfa.widths);
    m.at("lfa").get_to(mod.lfa_enabled);
    m.at("gfl").get_to(mod.gfl_enabled);
    mod.attention.mechanism = parse_mechanism(m.at("mechanism").get<std::string>());
    mod.attention.op = parse_operator(m.at("operator").get<std::string>());
    m.at("pos_enc").get_to(mod.attention.position_encoding);
    m.at("width").get_to(mod.attention.width);
    m.at("map_hidden").get_to(mod.attention.map_hidden);
    c.modules.push_back(std::move(mod));
  }
  c.validate();
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"epochs", c.epochs},   {"batch_size", c.batch_size},     {"lr", c.lr},
           {"momentum", c.momentum}, {"weight_decay", c.weight_decay}, {"seed", c.seed}};
}

void from_json(const json& j, TrainConfig& c) {
  reject_unknown(j, {"epochs", "batch_size", "lr", "momentum", "weight_decay", "seed"}, "train");
  read(j, "epochs", c.epochs);
  read(j, "batch_size", c.batch_size);
  read(j, "lr", c.lr);
  read(j, "momentum", c.momentum);
  read(j, "weight_decay", c.weight_decay);
  read(j, "seed", c.seed);
}

void to_json(json& j, const DataSpec& d) {
  j = json{{"train_manifest", d.train_manifest}, {"test_manifest", d.test_manifest},
           {"classes", d.classes},               {"train_per_class", d.train_per_class},
           {"test_per_class", d.test_per_class}, {"noise", d.noise},
           {"seed", d.seed}};
}

void from_json(const json& j, DataSpec& d) {
  reject_unknown(j, {"train_manifest", "test_manifest", "classes", "train_per_class", "test_per_class", "noise", "seed"},
                 "data");
  read(j, "train_manifest", d.train_manifest);
  read(j, "test_manifest", d.test_manifest);
  read(j, "classes", d.classes);
  read(j, "train_per_class", d.train_per_class);
  read(j, "test_per_class", d.test_per_class);
  read(j, "noise", d.noise);
  read(j, "seed", d.seed);
}

void to_json(json& j, const RunConfig& r) {
  j = json{{"model", r.model}, {"train", r.train},   {"data", r.data},
           {"out", r.out},     {"seed", r.seed},     {"stop_train_acc", r.stop_train_acc},
           {"stop_test_acc", r.stop_test_acc}};
}

void from_json(const json& j, RunConfig& r) {
  reject_unknown(j, {"model", "train", "data", "out", "seed", "stop_train_acc", "stop_test_acc"}, "config");
  read(j, "model", r.model);
  read(j, "train", r.train);
  read(j, "data", r.data);
  read(j, "out", r.out);
  read(j, "seed", r.seed);
  read(j, "stop_train_acc", r.stop_train_acc);
  read(j, "stop_test_acc", r.stop_test_acc);
}

void to_json(json& j, const Metrics& m) {
  j = json{{"mAcc", m.mean_accuracy}, {"OA", m.overall_accuracy}, {"correct", m.correct},
           {"total", m.total},        {"confusion", m.confusion}};
}

void to_json(json& j, const EpochLog& log) {
  j = json{{"epoch", log.epoch},         {"lr", log.lr},          {"train_loss", log.train_loss},
           {"train_acc", log.train_acc}, {"test_mAcc", log.test_macc}, {"test_OA", log.test_oa}};
}

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

void write_json(const std::filesystem::path& path, const json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

}  // namespace ctn
