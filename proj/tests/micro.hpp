#pragma once

// A small model configuration shared by the network tests and the
// acceptance binary: one or two modules, a handful of channels.

#include "ctn/network.hpp"

namespace testing_support {

/// points input points, one module of samples centers with one grouping
/// scale (radius 0.5, K 4) of width d, head of width d.
inline ctn::ModelConfig micro_config(std::size_t points = 16, std::size_t samples = 4, std::size_t d = 8,
                                     std::size_t classes = 3) {
  ctn::ModelConfig c;
  c.points = points;
  c.classes = classes;
  ctn::ModuleConfig m;
  m.samples = samples;
  m.lfa.grouping.scales = {{0.5, 4}};
  m.lfa.widths = {{d}};
  m.attention.width = d;
  c.modules = {m};
  c.embed_width = d;
  c.head_widths = {d};
  return c;
}

/// Two modules (samples s1 then s2), each with two grouping scales.
inline ctn::ModelConfig small_config(std::size_t points, std::size_t classes, ctn::Mechanism mech = ctn::Mechanism::offset,
                                     ctn::Operator op = ctn::Operator::subtraction) {
  ctn::ModelConfig c;
  c.points = points;
  c.classes = classes;
  ctn::ModuleConfig a;
  a.samples = points / 4;
  a.lfa.grouping.scales = {{0.2, 8}, {0.4, 16}};
  a.lfa.widths = {{8}, {8}};
  a.attention.width = 16;
  a.attention.mechanism = mech;
  a.attention.op = op;
  ctn::ModuleConfig b = a;
  b.samples = points / 16;
  b.lfa.grouping.scales = {{0.4, 8}, {0.8, 16}};
  b.lfa.widths = {{16}, {16}};
  b.attention.width = 32;
  c.modules = {a, b};
  c.embed_width = 64;
  c.head_widths = {32, 16};
  return c;
}

}  // namespace testing_support
