#pragma once

// Declarative architecture description, model construction, sequential
// forward/backward execution, and the parameter/MAC cost model.
//
// The reference architecture is a 15-layer sequential network: four groups
// of 3x3 unit cells (widths 64,128,128,128 | 128x3 | 128x3 | 128x2), each
// group followed by a 2x2 max pool (spatial 32->16->8->4->2), then 1x1
// unit cells of widths 128, 128, num_classes, then global average pooling
// producing the logits. No residual connections, no parallel branches, no
// fully connected layers.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fastnet/layers.hpp"
#include "fastnet/tensor.hpp"

namespace fastnet {

struct ArchitectureSpec {
  int num_classes = 0;
  // 3x3 conv cell widths, one inner vector per group; a 2x2 max pool
  // follows every group.
  std::vector<std::vector<int>> conv_groups;
  // 1x1 conv cell widths between the last pool and the classifier cell.
  std::vector<int> head_widths;
  int input_channels = 3;
  bool first_cell_plain_conv = false;  // plain conv instead of a full cell for layer 1
  bool conv_bias = true;

  // The reference network. 12 3x3 cells in groups of 4/3/3/2, then a
  // 128,128,num_classes 1x1 head.
  static ArchitectureSpec fastnet(int num_classes) {
    ArchitectureSpec s;
    s.num_classes = num_classes;
    s.conv_groups = {{64, 128, 128, 128}, {128, 128, 128}, {128, 128, 128}, {128, 128}};
    s.head_widths = {128, 128};
    return s;
  }

  struct LayerDef {
    int in_channels;
    int out_channels;
    int kernel;       // 3 or 1
    bool pool_after;  // 2x2 max pool follows this layer
    bool has_bn;
  };

  // Flattened layer list: grouped 3x3 cells, head 1x1 cells, and (when
  // num_classes > 0) the 1x1 classifier cell.
  std::vector<LayerDef> layers() const {
    std::vector<LayerDef> out;
    int in_ch = input_channels;
    for (const auto& group : conv_groups) {
      for (std::size_t i = 0; i < group.size(); ++i) {
        const bool last_in_group = (i + 1 == group.size());
        out.push_back({in_ch, group[i], 3, last_in_group, true});
        in_ch = group[i];
      }
    }
    for (int w : head_widths) {
      out.push_back({in_ch, w, 1, false, true});
      in_ch = w;
    }
    if (num_classes > 0) out.push_back({in_ch, num_classes, 1, false, true});
    if (!out.empty() && first_cell_plain_conv) out.front().has_bn = false;
    return out;
  }

  int pool_count() const { return static_cast<int>(conv_groups.size()); }

  void validate() const {
    if (num_classes < 2) fail(ErrorCode::invalid_argument, "spec: num_classes must be >= 2");
    if (input_channels < 1) fail(ErrorCode::invalid_argument, "spec: input_channels must be >= 1");
    for (const auto& group : conv_groups) {
      if (group.empty()) fail(ErrorCode::invalid_argument, "spec: empty conv group");
      for (int w : group)
        if (w < 1) fail(ErrorCode::invalid_argument, "spec: conv width must be >= 1");
    }
    for (int w : head_widths)
      if (w < 1) fail(ErrorCode::invalid_argument, "spec: head width must be >= 1");
  }

  // FNV-1a over a canonical encoding; stored in model files and checked at
  // load time so weights cannot silently attach to a different topology.
  std::uint64_t fingerprint() const {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    auto mix = [&h](std::uint64_t v) {
      for (int i = 0; i < 8; ++i) {
        h ^= (v >> (8 * i)) & 0xFF;
        h *= 0x100000001B3ULL;
      }
    };
    mix(0x6661737400000001ULL);  // format tag
    mix(static_cast<std::uint64_t>(num_classes));
    mix(static_cast<std::uint64_t>(input_channels));
    mix(conv_groups.size());
    for (const auto& group : conv_groups) {
      mix(group.size());
      for (int w : group) mix(static_cast<std::uint64_t>(w));
    }
    mix(head_widths.size());
    for (int w : head_widths) mix(static_cast<std::uint64_t>(w));
    mix(static_cast<std::uint64_t>(first_cell_plain_conv ? 1 : 0) | (conv_bias ? 2 : 0));
    return h;
  }
};

template <typename T>
struct LayerState {
  std::optional<BatchNormParams<T>> bn;
  ConvParams<T> conv;
};

// Ordered layer parameters plus the input normalization constants, which
// travel with the weights so a saved model is self-contained for inference.
template <typename T>
struct ModelState {
  ArchitectureSpec spec;
  std::vector<LayerState<T>> layers;
  Tensor<T> input_mean{{3}, T(0)};
  Tensor<T> input_std{{3}, T(1)};
};

// Build a freshly initialized model: he_normal conv weights with
// fan_in = Cin*K*K, zero biases, gamma 1, beta 0, running stats (0, 1).
// Weight draws consume the RNG in layer order, so a fixed seed gives a
// bit-identical model on every build.
template <typename T>
ModelState<T> build_model(const ArchitectureSpec& spec, Rng rng) {
  spec.validate();
  ModelState<T> model;
  model.spec = spec;
  for (const auto& def : spec.layers()) {
    LayerState<T> layer;
    if (def.has_bn) layer.bn = BatchNormParams<T>::make(def.in_channels);
    layer.conv = ConvParams<T>::make(def.out_channels, def.in_channels, def.kernel, spec.conv_bias, rng);
    model.layers.push_back(std::move(layer));
  }
  model.input_mean = Tensor<T>::zeros({spec.input_channels});
  model.input_std = Tensor<T>::full({spec.input_channels}, T(1));
  return model;
}

template <typename T>
ModelState<T> build_fastnet(int num_classes, Rng rng) {
  return build_model<T>(ArchitectureSpec::fastnet(num_classes), rng);
}

template <typename T>
struct ForwardCache {
  std::vector<UnitCellCache<T>> cells;  // one per conv layer; .input doubles as plain-conv input
  std::vector<PoolCache> pools;
  Shape gap_in_shape;
};

// Sequential execution. Train mode mutates only the BN running statistics;
// infer mode is pure. Returns pre-softmax logits (N, num_classes).
template <typename T>
Tensor<T> network_forward(ModelState<T>& model, const Tensor<T>& input, Mode mode,
                          ForwardCache<T>* cache = nullptr) {
  const auto defs = model.spec.layers();
  if (defs.empty()) fail(ErrorCode::invalid_argument, "network_forward: empty architecture");
  if (input.rank() != 4 || input.extent(1) != model.spec.input_channels)
    fail(ErrorCode::shape_mismatch,
         "network_forward: input must be (N," + std::to_string(model.spec.input_channels) + ",H,W), got " +
             input.shape().str());
  if (model.layers.size() != defs.size())
    fail(ErrorCode::invalid_argument, "network_forward: model/spec layer count mismatch");
  if (cache) {
    cache->cells.assign(defs.size(), {});
    cache->pools.clear();
  }

  Tensor<T> act = input;
  for (std::size_t li = 0; li < defs.size(); ++li) {
    auto& layer = model.layers[li];
    if (layer.bn.has_value()) {
      act = unit_cell_forward(std::move(act), *layer.bn, layer.conv, mode, cache ? &cache->cells[li] : nullptr);
    } else {
      Tensor<T> in = std::move(act);
      act = conv2d_forward(in, layer.conv);
      if (cache) cache->cells[li].input = std::move(in);
    }
    if (defs[li].pool_after) {
      auto pooled = maxpool2_forward(act);
      act = std::move(pooled.first);
      if (cache) cache->pools.push_back(std::move(pooled.second));
    }
  }
  if (cache) cache->gap_in_shape = act.shape();
  return global_avg_pool(act);
}

// Read-only forward for concurrent inference over a shared model. Infer
// mode never writes through the parameter references.
template <typename T>
Tensor<T> infer_forward(const ModelState<T>& model, const Tensor<T>& input) {
  return network_forward(const_cast<ModelState<T>&>(model), input, Mode::infer);
}

template <typename T>
struct LayerGrads {
  Tensor<T> gamma, beta;   // empty for plain-conv layers
  Tensor<T> weight, bias;  // bias empty when conv_bias is off
};

// Gradients for every learnable tensor, in layer order. Requires the cache
// of a matching train-mode forward on the same model.
template <typename T>
std::vector<LayerGrads<T>> network_backward(const ModelState<T>& model, const ForwardCache<T>& cache,
                                            const Tensor<T>& d_logits) {
  const auto defs = model.spec.layers();
  if (cache.cells.size() != defs.size() ||
      cache.pools.size() != static_cast<std::size_t>(model.spec.pool_count()))
    fail(ErrorCode::invalid_argument, "network_backward: missing or stale forward cache");
  for (std::size_t li = 0; li < defs.size(); ++li) {
    if (cache.cells[li].input.empty() || (defs[li].has_bn && !cache.cells[li].bn.valid))
      fail(ErrorCode::invalid_argument, "network_backward: missing or stale forward cache");
  }

  std::vector<LayerGrads<T>> grads(defs.size());
  Tensor<T> d = global_avg_pool_backward(cache.gap_in_shape, d_logits);
  std::size_t pool_index = cache.pools.size();
  for (std::size_t ri = defs.size(); ri-- > 0;) {
    if (defs[ri].pool_after) d = maxpool2_backward(cache.pools[--pool_index], d);
    const auto& layer = model.layers[ri];
    if (layer.bn.has_value()) {
      UnitCellGrads<T> ug = unit_cell_backward(*layer.bn, layer.conv, cache.cells[ri], d);
      grads[ri].gamma = std::move(ug.gamma);
      grads[ri].beta = std::move(ug.beta);
      grads[ri].weight = std::move(ug.weight);
      grads[ri].bias = std::move(ug.bias);
      d = std::move(ug.input);
    } else {
      ConvGrads<T> cg = conv2d_backward(cache.cells[ri].input, layer.conv, d);
      grads[ri].weight = std::move(cg.weight);
      grads[ri].bias = std::move(cg.bias);
      d = std::move(cg.input);
    }
  }
  return grads;
}

// Exact count of learnable scalars:
// sum over convs of Cout*Cin*K*K (+ Cout bias) plus 2*Cin per BN.
inline long long count_params(const ArchitectureSpec& spec) {
  long long total = 0;
  for (const auto& def : spec.layers()) {
    total += static_cast<long long>(def.out_channels) * def.in_channels * def.kernel * def.kernel;
    if (spec.conv_bias) total += def.out_channels;
    if (def.has_bn) total += 2LL * def.in_channels;
  }
  return total;
}

// Multiply-accumulates for one forward pass at the given input resolution:
// sum over convs of Cout*Cin*K*K*Hout*Wout.
inline long long count_macs(const ArchitectureSpec& spec, int input_hw = 32) {
  long long total = 0;
  long long hw = static_cast<long long>(input_hw) * input_hw;
  for (const auto& def : spec.layers()) {
    total += static_cast<long long>(def.out_channels) * def.in_channels * def.kernel * def.kernel * hw;
    if (def.pool_after) hw /= 4;
  }
  return total;
}

struct CostRow {
  std::string layer;
  std::string type;
  std::string out_shape;  // CxHxW (C alone for the pooled logits row)
  long long params = 0;   // conv weights + conv bias for conv rows
  long long macs = 0;
};

struct CostReport {
  std::vector<CostRow> rows;
  long long total_params = 0;  // includes BN scalars
  long long total_macs = 0;
  std::string csv() const;
};

// Per-layer cost table mirroring the executed graph: one row per conv cell,
// per pool, and for the final pooling. Conv rows list conv weights + bias;
// the BN scalars of each cell appear in the totals, which equal
// count_params/count_macs exactly.
inline CostReport inspect_report(const ArchitectureSpec& spec, int input_hw = 32) {
  CostReport report;
  int hw = input_hw;
  int conv_index = 0, pool_index = 0;
  auto shape_str = [](int c, int h, int w) {
    return std::to_string(c) + "x" + std::to_string(h) + "x" + std::to_string(w);
  };
  const auto defs = spec.layers();
  int channels = spec.input_channels;
  for (const auto& def : defs) {
    ++conv_index;
    CostRow row;
    char name[16];
    std::snprintf(name, sizeof(name), "conv%02d", conv_index);
    row.layer = name;
    row.type = def.kernel == 3 ? "conv3x3" : "conv1x1";
    row.out_shape = shape_str(def.out_channels, hw, hw);
    row.params = static_cast<long long>(def.out_channels) * def.in_channels * def.kernel * def.kernel +
                 (spec.conv_bias ? def.out_channels : 0);
    row.macs = static_cast<long long>(def.out_channels) * def.in_channels * def.kernel * def.kernel *
               static_cast<long long>(hw) * hw;
    report.rows.push_back(std::move(row));
    channels = def.out_channels;
    if (def.pool_after) {
      hw /= 2;
      ++pool_index;
      report.rows.push_back(
          {"pool" + std::to_string(pool_index), "maxpool2x2", shape_str(channels, hw, hw), 0, 0});
    }
  }
  report.rows.push_back({"gap", "global_avg_pool", std::to_string(channels), 0, 0});
  report.total_params = count_params(spec);
  report.total_macs = count_macs(spec, input_hw);
  return report;
}

inline std::string CostReport::csv() const {
  std::string out = "layer,type,out_shape,params,macs\n";
  for (const auto& row : rows) {
    out += row.layer + "," + row.type + "," + row.out_shape + "," + std::to_string(row.params) + "," +
           std::to_string(row.macs) + "\n";
  }
  out += "total,,," + std::to_string(total_params) + "," + std::to_string(total_macs) + "\n";
  return out;
}

}  // namespace fastnet
