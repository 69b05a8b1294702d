#include "ctn/costs.hpp"

namespace ctn {

namespace {

std::size_t linear_params(std::size_t in, std::size_t out, bool bias = true) { return in * out + (bias ? out : 0); }
std::size_t lbr_params(std::size_t in, std::size_t out) { return linear_params(in, out) + 2 * out; }

}  // namespace

Costs count_costs(const ModelConfig& config) {
  config.validate();
  Costs c;
  std::size_t width = config.input_features;
  for (const auto& mod : config.modules) {
    const std::size_t s = mod.samples;
    for (std::size_t k = 0; k < mod.lfa.widths.size(); ++k) {
      const std::size_t members = mod.lfa_enabled ? mod.lfa.grouping.scales[k].members : 1;
      std::size_t in = mod.lfa_enabled ? 2 * width + 3 : width + 3;
      for (std::size_t w : mod.lfa.widths[k]) {
        c.parameters += lbr_params(in, w);
        c.macs += s * members * in * w;
        in = w;
      }
    }
    width = mod.lfa.output_width();
    if (!mod.gfl_enabled) continue;

    const AttentionConfig& a = mod.attention;
    const std::size_t d = a.width;
    const std::size_t pairs = s * s;
    c.parameters += 3 * d * d;
    c.macs += 3 * s * d * d;
    if (!a.vector_form()) {
      c.macs += 2 * pairs * d;  // Q K^T and E V
    } else {
      const std::size_t h = a.tau_hidden();
      c.parameters += linear_params(a.delta_width(), h) + linear_params(h, d);
      c.macs += pairs * (a.delta_width() * h + h * d);
      if (a.op == Operator::hadamard || a.op == Operator::division) c.macs += pairs * d;
      if (a.position_encoding) {
        c.parameters += linear_params(3, d) + 2 * d + linear_params(d, d);
        c.macs += pairs * (3 * d + d * d);
      }
      c.macs += pairs * d;  // per-channel weighted sum of values
    }
    if (a.mechanism == Mechanism::offset) {
      c.parameters += lbr_params(d, d);
      c.macs += s * d * d;
    }
  }
  const std::size_t last_samples = config.modules.back().samples;
  c.parameters += lbr_params(width, config.embed_width);
  c.macs += last_samples * width * config.embed_width;
  width = config.embed_width;
  for (std::size_t w : config.head_widths) {
    c.parameters += lbr_params(width, w);
    c.macs += width * w;
    width = w;
  }
  c.parameters += linear_params(width, config.classes);
  c.macs += width * config.classes;
  return c;
}

}  // namespace ctn
