#pragma once

// Turns a genome into a concrete differentiable model and builds its forward
// pass on a Tape: input projection, stacked message-passing stages with
// per-head edge networks and attention, optional skip connections, a gather
// readout, two dense-32 layers, and the (mu, sigma^2) output head.
//
// Molecules are compiled first: masked rows are dropped and indices remapped
// so the tape only ever sees real atoms and edges. Gathers whose output is
// indexed by node position (pool-*, flatten) re-pad with exact zero rows, so
// results are identical however much padding the input carried.

#include <gnnuq/archspace.hpp>
#include <gnnuq/diffcore.hpp>
#include <gnnuq/error.hpp>
#include <gnnuq/molgraph.hpp>
#include <gnnuq/rng.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace gnnuq {

// ---------------------------------------------------------------------------
// Compiled graphs

// Dense, mask-free form of a MolGraph: only real atoms (indices remapped to
// 0..n-1 in their original order) and real edges. graph_seg is the all-zero
// segment vector used for whole-graph reductions; it lives here because tape
// nodes keep spans into it.
struct CompiledGraph {
  Tensor X;                          // [n, F_n]
  Tensor E;                          // [e, F_e]
  std::vector<std::int32_t> src;     // length e
  std::vector<std::int32_t> dst;     // length e
  std::vector<std::int32_t> graph_seg;  // length n, all zeros
  std::int64_t n = 0;
  std::int64_t e = 0;
};

inline CompiledGraph compile(const MolGraph& g) {
  CompiledGraph c;
  std::vector<std::int32_t> remap(g.node_mask.size(), -1);
  for (std::size_t i = 0; i < g.node_mask.size(); ++i)
    if (g.node_mask[i] == 1.0) remap[i] = std::int32_t(c.n++);

  c.X = Tensor::zeros(c.n, g.H.cols);
  std::int64_t row = 0;
  for (std::size_t i = 0; i < g.node_mask.size(); ++i) {
    if (g.node_mask[i] != 1.0) continue;
    for (std::int64_t f = 0; f < g.H.cols; ++f)
      c.X.at(row, f) = g.H.at(std::int64_t(i), f);
    ++row;
  }

  for (std::size_t r = 0; r < g.edge_mask.size(); ++r) {
    if (g.edge_mask[r] != 1.0) continue;
    const auto s = remap[std::size_t(g.edge_src[r])];
    const auto d = remap[std::size_t(g.edge_dst[r])];
    if (s < 0 || d < 0)
      throw Error(errc::ShapeMismatch,
                  "unmasked edge references a masked node");
    c.src.push_back(s);
    c.dst.push_back(d);
    ++c.e;
  }
  c.E = Tensor::zeros(c.e, g.E.cols);
  std::int64_t er = 0;
  for (std::size_t r = 0; r < g.edge_mask.size(); ++r) {
    if (g.edge_mask[r] != 1.0) continue;
    for (std::int64_t f = 0; f < g.E.cols; ++f)
      c.E.at(er, f) = g.E.at(std::int64_t(r), f);
    ++er;
  }
  c.graph_seg.assign(std::size_t(c.n), 0);
  return c;
}

// ---------------------------------------------------------------------------
// Model instance

struct ModelInstance {
  Genome genome;
  ArchGenes arch;
  std::int64_t f_n = 0;
  std::int64_t f_e = 0;
  std::int64_t n_max = 0;
  std::uint64_t init_seed = 0;

  // Parallel arrays in canonical (creation) order; the order is the Glorot
  // draw order and the checkpoint order, so it must never change.
  std::vector<std::string> names;
  std::vector<Tensor> weights;
  std::unordered_map<std::string, std::size_t> index;

  std::size_t find(const std::string& name) const {
    auto it = index.find(name);
    if (it == index.end())
      throw Error(errc::ShapeMismatch, "model has no weight '" + name + "'");
    return it->second;
  }
  const Tensor& weight(const std::string& name) const {
    return weights[find(name)];
  }
  std::int64_t param_count() const {
    std::int64_t total = 0;
    for (const Tensor& w : weights) total += w.size();
    return total;
  }
};

namespace detail {

// Shape plan shared by initialization and checkpoint loading.
struct WeightPlan {
  std::string name;
  std::int64_t rows, cols;
  bool glorot;  // false -> zeros (biases)
};

inline std::int64_t gather_output_dim(const ArchGenes& arch,
                                      std::int64_t n_max) {
  const std::int64_t d_last = arch.stages.back().hidden_dim;
  switch (arch.gather) {
    case GatherKind::PoolSum:
    case GatherKind::PoolMean:
    case GatherKind::PoolMax: return n_max;
    case GatherKind::GatherSum:
    case GatherKind::GatherMean:
    case GatherKind::GatherMax: return d_last;
    case GatherKind::AttnPool16:
    case GatherKind::AttnPool32:
    case GatherKind::AttnPool64: return attn_pool_dim(arch.gather);
    case GatherKind::AttnSumPool: return d_last;
    case GatherKind::Flatten: return n_max * d_last;
  }
  return 0;
}

// Skip gene of stage t (1-based) pulls from S_{t-1} or S_{t-2}, where S_0 is
// the projected input; a source before S_0 does not exist and the gene is a
// structural no-op.
inline int skip_source(const ArchGenes& arch, int t) {
  if (std::size_t(t - 1) >= arch.skips.size()) return -1;
  switch (arch.skips[std::size_t(t - 1)]) {
    case SkipKind::None: return -1;
    case SkipKind::OneBack: return t - 1;
    case SkipKind::TwoBack: return t - 2;
  }
  return -1;
}

inline std::vector<WeightPlan> plan_weights(const ArchGenes& arch,
                                            std::int64_t f_n,
                                            std::int64_t f_e,
                                            std::int64_t n_max) {
  if (!arch.has_gather)
    throw Error(errc::GeneOutOfRange,
                "model instantiation needs a space with a gather gene");
  std::vector<WeightPlan> plan;
  auto dense = [&](const std::string& base, std::int64_t in,
                   std::int64_t out) {
    plan.push_back({base + ".W", in, out, true});
    plan.push_back({base + ".b", 1, out, false});
  };

  // stage output dims; dims[0] is the projected input
  std::vector<std::int64_t> dims{arch.stages[0].hidden_dim};
  for (const StageGenes& s : arch.stages) dims.push_back(s.hidden_dim);

  dense("input_proj", f_n, dims[0]);

  for (std::size_t t = 1; t <= arch.stages.size(); ++t) {
    const StageGenes& s = arch.stages[t - 1];
    const std::string st = "stage" + std::to_string(t);
    const std::int64_t d_prev = dims[t - 1];
    const std::int64_t d = s.hidden_dim;
    if (d_prev != d) dense(st + ".proj", d_prev, d);
    for (int k = 1; k <= s.heads; ++k) {
      const std::string hd = st + ".head" + std::to_string(k);
      dense(hd + ".edge", f_e, d * d);
      switch (s.attention) {
        case AttentionKind::Constant:
          break;
        case AttentionKind::Gat:
        case AttentionKind::SymGat:
          plan.push_back({hd + ".attn.a_l", d, 1, true});
          plan.push_back({hd + ".attn.a_r", d, 1, true});
          break;
        case AttentionKind::Cos:
          plan.push_back({hd + ".attn.a_l", 1, d, true});
          plan.push_back({hd + ".attn.a_r", 1, d, true});
          break;
        case AttentionKind::Linear:
          plan.push_back({hd + ".attn.a_r", d, 1, true});
          break;
        case AttentionKind::GenLinear:
          plan.push_back({hd + ".attn.W_l", d, d, true});
          plan.push_back({hd + ".attn.W_r", d, d, true});
          plan.push_back({hd + ".attn.g", d, 1, true});
          break;
      }
    }
    if (s.update == Update::Gru) {
      for (const char* gate : {"Wz", "Uz", "bz", "Wr", "Ur", "br", "Wh", "Uh",
                               "bh"}) {
        const bool bias = gate[0] == 'b';
        plan.push_back({st + ".gru." + std::string(gate), bias ? 1 : d, d,
                        !bias});
      }
    } else {
      dense(st + ".mlp", 2 * d, d);
    }
  }

  for (std::size_t t = 1; t <= arch.stages.size(); ++t) {
    const int src = skip_source(arch, int(t));
    if (src < 0) continue;
    dense("skip" + std::to_string(t), dims[std::size_t(src)],
          dims[t]);
  }

  const std::int64_t d_last = dims.back();
  switch (arch.gather) {
    case GatherKind::AttnPool16:
    case GatherKind::AttnPool32:
    case GatherKind::AttnPool64: {
      const std::int64_t fp = attn_pool_dim(arch.gather);
      dense("gather.attn1", d_last, fp);
      dense("gather.attn2", d_last, fp);
      break;
    }
    case GatherKind::AttnSumPool:
      plan.push_back({"gather.a", d_last, 1, true});
      break;
    default:
      break;
  }

  const std::int64_t tail_in = gather_output_dim(arch, n_max);
  dense("dense1", tail_in, 32);
  dense("dense2", 32, 32);
  dense("out", 32, 2);
  return plan;
}

}  // namespace detail

inline ModelInstance instantiate(const SearchSpace& space,
                                 const Genome& genome, std::int64_t f_n,
                                 std::int64_t f_e, std::int64_t n_max,
                                 std::uint64_t init_seed) {
  ModelInstance m;
  m.genome = genome;
  m.arch = interpret(space, genome);  // validates, throws GeneOutOfRange
  m.f_n = f_n;
  m.f_e = f_e;
  m.n_max = n_max;
  m.init_seed = init_seed;

  // One splitmix64 stream, consumed in canonical order; biases draw nothing.
  SplitMix64 rng(init_seed);
  for (const detail::WeightPlan& p :
       detail::plan_weights(m.arch, f_n, f_e, n_max)) {
    Tensor w = Tensor::zeros(p.rows, p.cols);
    if (p.glorot) {
      const double limit = std::sqrt(6.0 / double(p.rows + p.cols));
      for (double& x : w.data) x = rng.next_uniform(-limit, limit);
    }
    m.index.emplace(p.name, m.names.size());
    m.names.push_back(p.name);
    m.weights.push_back(std::move(w));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Tape-side builders. Weights enter the tape once per tape (variables when
// training, constants when predicting); builders receive the resulting ids.

inline std::vector<int> push_weights(Tape& t, const ModelInstance& m,
                                     bool trainable) {
  std::vector<int> ids;
  ids.reserve(m.weights.size());
  for (const Tensor& w : m.weights)
    ids.push_back(trainable ? t.var(w) : t.constant(w));
  return ids;
}

// Inference-time dropout: Bernoulli keep masks with inverted scaling, drawn
// eagerly from the caller's stream. rate 0 (or no context) is an exact no-op.
struct MpnnDropout {
  double rate = 0.0;
  SplitMix64* rng = nullptr;
};

namespace detail {

inline Red to_red(Aggregate a) {
  switch (a) {
    case Aggregate::Mean: return Red::Mean;
    case Aggregate::Sum: return Red::Sum;
    case Aggregate::Max: return Red::Max;
  }
  return Red::Sum;
}

inline int apply_dropout(Tape& t, int a, const MpnnDropout* drop) {
  if (drop == nullptr || drop->rng == nullptr || drop->rate <= 0.0) return a;
  const Tensor& v = t.value(a);
  Tensor mask(v.rows, v.cols);
  const double keep = 1.0 - drop->rate;
  for (double& x : mask.data)
    x = drop->rng->next_double() < keep ? 1.0 / keep : 0.0;
  return t.mul(a, t.constant(std::move(mask)));
}

struct StageWires {
  const ModelInstance& m;
  const std::vector<int>& wid;
  int id(const std::string& name) const { return wid[m.find(name)]; }
  bool has(const std::string& name) const {
    return m.index.find(name) != m.index.end();
  }
};

inline int dense_layer(Tape& t, const StageWires& w, const std::string& base,
                       int x) {
  return t.add_rowvec(t.matmul(x, w.id(base + ".W")), w.id(base + ".b"));
}

}  // namespace detail

// One message-passing stage (Eq. 1-2 with the stage's attention, aggregate,
// activation and update genes). Works on padded inputs when masks are given:
// masked edges are excluded from softmax and aggregation, masked node rows
// are zeroed after the update. Skip connections are added by the caller.
inline int build_message_stage(Tape& t, const ModelInstance& m, int stage,
                               int h_in, int e_feat,
                               std::span<const std::int32_t> src,
                               std::span<const std::int32_t> dst,
                               std::int64_t n_nodes,
                               const std::vector<int>& weight_ids,
                               std::span<const double> edge_mask = {},
                               std::span<const double> node_mask = {}) {
  const detail::StageWires w{m, weight_ids};
  const StageGenes& s = m.arch.stages[std::size_t(stage - 1)];
  const std::string st = "stage" + std::to_string(stage);
  const std::int64_t d = s.hidden_dim;

  int h = h_in;
  if (w.has(st + ".proj.W")) h = detail::dense_layer(t, w, st + ".proj", h);

  int head_sum = -1;
  for (int k = 1; k <= s.heads; ++k) {
    const std::string hd = st + ".head" + std::to_string(k);

    // Gilmer edge network: per-edge d x d matrix applied to the source state.
    int edge_mat = detail::dense_layer(t, w, hd + ".edge", e_feat);
    int h_src = t.gather_rows(h, src);
    int msg = t.batched_matvec(edge_mat, h_src, d);

    // Attention scores [e,1]; 'constant' keeps alpha = 1 with no softmax.
    int weighted = msg;
    if (s.attention != AttentionKind::Constant) {
      int score = -1;
      switch (s.attention) {
        case AttentionKind::Gat: {
          int sv = t.gather_rows(t.matmul(h, w.id(hd + ".attn.a_l")), dst);
          int sw = t.gather_rows(t.matmul(h, w.id(hd + ".attn.a_r")), src);
          score = t.activation(t.add(sv, sw), Act::LeakyRelu);
          break;
        }
        case AttentionKind::SymGat: {
          int hl = t.matmul(h, w.id(hd + ".attn.a_l"));
          int hr = t.matmul(h, w.id(hd + ".attn.a_r"));
          int fwd = t.activation(
              t.add(t.gather_rows(hl, dst), t.gather_rows(hr, src)),
              Act::LeakyRelu);
          int rev = t.activation(
              t.add(t.gather_rows(hl, src), t.gather_rows(hr, dst)),
              Act::LeakyRelu);
          score = t.add(fwd, rev);
          break;
        }
        case AttentionKind::Cos: {
          int u = t.mul_rowvec(h, w.id(hd + ".attn.a_l"));
          int v = t.mul_rowvec(h, w.id(hd + ".attn.a_r"));
          score = t.row_reduce(
              t.mul(t.gather_rows(u, dst), t.gather_rows(v, src)), Red::Sum);
          break;
        }
        case AttentionKind::Linear: {
          score = t.activation(
              t.gather_rows(t.matmul(h, w.id(hd + ".attn.a_r")), src),
              Act::Tanh);
          break;
        }
        case AttentionKind::GenLinear: {
          int mix = t.activation(
              t.add(t.gather_rows(t.matmul(h, w.id(hd + ".attn.W_l")), dst),
                    t.gather_rows(t.matmul(h, w.id(hd + ".attn.W_r")), src)),
              Act::Tanh);
          score = t.matmul(mix, w.id(hd + ".attn.g"));
          break;
        }
        case AttentionKind::Constant:
          break;
      }
      int alpha = t.segment_softmax(score, dst, edge_mask, n_nodes);
      weighted = t.mul_colvec(msg, alpha);
    }

    int agg = t.segment_reduce(weighted, detail::to_red(s.aggregate), dst,
                               edge_mask, n_nodes);
    head_sum = head_sum < 0 ? agg : t.add(head_sum, agg);
  }
  int agg = s.heads > 1 ? t.mul_scalar(head_sum, 1.0 / s.heads) : head_sum;

  int out;
  if (s.update == Update::Gru) {
    Tape::GruParams p{w.id(st + ".gru.Wz"), w.id(st + ".gru.Uz"),
                      w.id(st + ".gru.bz"), w.id(st + ".gru.Wr"),
                      w.id(st + ".gru.Ur"), w.id(st + ".gru.br"),
                      w.id(st + ".gru.Wh"), w.id(st + ".gru.Uh"),
                      w.id(st + ".gru.bh")};
    out = t.activation(t.gru_cell(h, agg, p), s.activation);
  } else {
    out = t.activation(
        detail::dense_layer(t, w, st + ".mlp", t.concat_cols(h, agg)),
        s.activation);
  }
  if (!node_mask.empty()) {
    Tensor mask_col(n_nodes, 1);
    for (std::int64_t i = 0; i < n_nodes; ++i)
      mask_col.at(i, 0) = node_mask[std::size_t(i)];
    out = t.mul_colvec(out, t.constant(std::move(mask_col)));
  }
  return out;
}

// Gather/readout on the final node states [n, d]; n_real rows are real, and
// position-indexed kinds (pool-*, flatten) re-pad to n_max with zero rows.
inline int build_gather(Tape& t, const ModelInstance& m, int h,
                        std::span<const std::int32_t> graph_seg,
                        const std::vector<int>& weight_ids) {
  const detail::StageWires w{m, weight_ids};
  switch (m.arch.gather) {
    case GatherKind::PoolSum:
    case GatherKind::PoolMean:
    case GatherKind::PoolMax: {
      const Red red = m.arch.gather == GatherKind::PoolSum    ? Red::Sum
                      : m.arch.gather == GatherKind::PoolMean ? Red::Mean
                                                              : Red::Max;
      int padded = t.pad_rows(h, m.n_max);
      return t.reshape(t.row_reduce(padded, red), 1, m.n_max);
    }
    case GatherKind::GatherSum:
      return t.segment_reduce(h, Red::Sum, graph_seg, {}, 1);
    case GatherKind::GatherMean:
      return t.segment_reduce(h, Red::Mean, graph_seg, {}, 1);
    case GatherKind::GatherMax:
      return t.segment_reduce(h, Red::Max, graph_seg, {}, 1);
    case GatherKind::AttnPool16:
    case GatherKind::AttnPool32:
    case GatherKind::AttnPool64: {
      int gate = t.activation(detail::dense_layer(t, w, "gather.attn1", h),
                              Act::Sigmoid);
      int val = detail::dense_layer(t, w, "gather.attn2", h);
      return t.segment_reduce(t.mul(gate, val), Red::Sum, graph_seg, {}, 1);
    }
    case GatherKind::AttnSumPool: {
      int score = t.matmul(h, w.id("gather.a"));
      int alpha = t.segment_softmax(score, graph_seg, {}, 1);
      return t.segment_reduce(t.mul_colvec(h, alpha), Red::Sum, graph_seg, {},
                              1);
    }
    case GatherKind::Flatten: {
      int padded = t.pad_rows(h, m.n_max);
      return t.reshape(padded, 1, m.n_max * t.value(h).cols);
    }
  }
  throw Error(errc::GeneOutOfRange, "unknown gather kind");
}

struct ForwardHandles {
  int mu = -1;   // [1,1]
  int var = -1;  // [1,1], softplus(raw) + 1e-6
};

inline ForwardHandles build_forward(Tape& t, const ModelInstance& m,
                                    const CompiledGraph& g,
                                    const std::vector<int>& weight_ids,
                                    const MpnnDropout* dropout = nullptr) {
  const detail::StageWires w{m, weight_ids};
  if (g.X.cols != m.f_n || g.E.cols != m.f_e)
    throw Error(errc::ShapeMismatch,
                "graph features " + g.X.shape_str() + "/" + g.E.shape_str() +
                    " do not match model F_n=" + std::to_string(m.f_n) +
                    " F_e=" + std::to_string(m.f_e));
  if (g.n > m.n_max)
    throw Error(errc::ShapeMismatch,
                "graph has " + std::to_string(g.n) +
                    " nodes but the model was built for n_max " +
                    std::to_string(m.n_max));

  int x = detail::apply_dropout(t, t.constant(g.X), dropout);
  int e_feat = t.constant(g.E);

  // S[0] = projected input; S[t] = stage t output (skip sources).
  std::vector<int> S;
  S.push_back(detail::dense_layer(t, w, "input_proj", x));

  for (std::size_t st = 1; st <= m.arch.stages.size(); ++st) {
    int h_in = detail::apply_dropout(t, S.back(), dropout);
    int out = build_message_stage(t, m, int(st), h_in, e_feat, g.src, g.dst,
                                  g.n, weight_ids);
    const int src_stage = detail::skip_source(m.arch, int(st));
    if (src_stage >= 0) {
      const std::string sk = "skip" + std::to_string(st);
      out = t.add(out, detail::dense_layer(t, w, sk,
                                           S[std::size_t(src_stage)]));
    }
    S.push_back(out);
  }

  int v = build_gather(t, m, S.back(), g.graph_seg, weight_ids);
  int h1 = t.activation(
      detail::dense_layer(t, w, "dense1", detail::apply_dropout(t, v, dropout)),
      Act::Relu);
  int h2 = t.activation(
      detail::dense_layer(t, w, "dense2",
                          detail::apply_dropout(t, h1, dropout)),
      Act::Relu);
  int o = detail::dense_layer(t, w, "out",
                              detail::apply_dropout(t, h2, dropout));

  ForwardHandles out;
  out.mu = t.slice_col(o, 0);
  out.var = t.add_scalar(t.activation(t.slice_col(o, 1), Act::Softplus), 1e-6);
  return out;
}

// Convenience inference path: fresh tape, constant weights.
inline std::pair<double, double> predict_one(const ModelInstance& m,
                                             const CompiledGraph& g,
                                             const MpnnDropout* dropout =
                                                 nullptr) {
  Tape t;
  std::vector<int> wid = push_weights(t, m, /*trainable=*/false);
  ForwardHandles f = build_forward(t, m, g, wid, dropout);
  return {t.value(f.mu).data[0], t.value(f.var).data[0]};
}

// ---------------------------------------------------------------------------
// Checkpoints: magic "GUQW", version u32, array count u32, then per array
// name (u16 length + UTF-8), rank u8, dims u64 LE, payload f64 LE. The
// genome and model dims ride along as reserved arrays so a checkpoint is
// self-contained.

namespace detail {

inline constexpr char kCkptMagic[4] = {'G', 'U', 'Q', 'W'};
inline constexpr std::uint32_t kCkptVersion = 1;

inline void put_u16(std::ostream& os, std::uint16_t v) {
  unsigned char b[2] = {static_cast<unsigned char>(v & 0xFF),
                        static_cast<unsigned char>(v >> 8)};
  os.write(reinterpret_cast<const char*>(b), 2);
}
inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}
inline void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}
inline void put_f64(std::ostream& os, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, 8);
  put_u64(os, bits);
}

inline std::uint16_t get_u16(std::istream& is) {
  unsigned char b[2];
  is.read(reinterpret_cast<char*>(b), 2);
  return std::uint16_t(b[0] | (std::uint16_t(b[1]) << 8));
}
inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}
inline std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}
inline double get_f64(std::istream& is) {
  std::uint64_t bits = get_u64(is);
  double d;
  std::memcpy(&d, &bits, 8);
  return d;
}

inline void put_array(std::ostream& os, const std::string& name,
                      const Tensor& w) {
  put_u16(os, std::uint16_t(name.size()));
  os.write(name.data(), std::streamsize(name.size()));
  os.put(char(2));  // rank: everything here is a matrix
  put_u64(os, std::uint64_t(w.rows));
  put_u64(os, std::uint64_t(w.cols));
  for (double d : w.data) put_f64(os, d);
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const ModelInstance& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os)
    throw Error(errc::IoError,
                "cannot open checkpoint '" + path + "' for writing");
  os.write(detail::kCkptMagic, 4);
  detail::put_u32(os, detail::kCkptVersion);
  detail::put_u32(os, std::uint32_t(m.weights.size()) + 2);

  // __meta__: space_version, F_n, F_e, N_max, init_seed split into two
  // 32-bit halves (a raw u64 does not survive an f64 payload).
  Tensor meta(1, 6);
  meta.data = {double(m.genome.space_version),
               double(m.f_n),
               double(m.f_e),
               double(m.n_max),
               double(std::uint32_t(m.init_seed >> 32)),
               double(std::uint32_t(m.init_seed & 0xFFFFFFFFu))};
  detail::put_array(os, "__meta__", meta);

  Tensor genes(1, std::int64_t(m.genome.genes.size()));
  for (std::size_t k = 0; k < m.genome.genes.size(); ++k)
    genes.data[k] = double(m.genome.genes[k]);
  detail::put_array(os, "__genome__", genes);

  for (std::size_t k = 0; k < m.weights.size(); ++k)
    detail::put_array(os, m.names[k], m.weights[k]);
  if (!os)
    throw Error(errc::IoError, "write failure on checkpoint '" + path + "'");
}

inline ModelInstance load_checkpoint(const std::string& path,
                                     const SearchSpace& space) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(errc::IoError, "cannot open checkpoint '" + path + "'");
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, detail::kCkptMagic, 4) != 0)
    throw Error(errc::VersionMismatch,
                "'" + path + "' is not a GUQW checkpoint");
  const std::uint32_t version = detail::get_u32(is);
  if (version != detail::kCkptVersion)
    throw Error(errc::VersionMismatch,
                "checkpoint version " + std::to_string(version) +
                    ", expected " + std::to_string(detail::kCkptVersion));
  const std::uint32_t count = detail::get_u32(is);

  std::map<std::string, Tensor> arrays;
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::uint16_t len = detail::get_u16(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    const int rank = is.get();
    if (rank != 2)
      throw Error(errc::IoError,
                  "checkpoint array '" + name + "' has rank " +
                      std::to_string(rank) + ", expected 2");
    const auto rows = std::int64_t(detail::get_u64(is));
    const auto cols = std::int64_t(detail::get_u64(is));
    if (!is || rows < 0 || cols < 0 || rows * cols > (1 << 28))
      throw Error(errc::IoError, "checkpoint '" + path + "' is corrupt");
    Tensor w(rows, cols);
    for (double& d : w.data) d = detail::get_f64(is);
    if (!is)
      throw Error(errc::IoError, "checkpoint '" + path + "' is truncated");
    arrays.emplace(std::move(name), std::move(w));
  }

  auto meta_it = arrays.find("__meta__");
  auto genes_it = arrays.find("__genome__");
  if (meta_it == arrays.end() || genes_it == arrays.end())
    throw Error(errc::IoError,
                "checkpoint '" + path + "' lacks __meta__/__genome__");
  const Tensor& meta = meta_it->second;
  if (meta.size() != 6)
    throw Error(errc::IoError, "checkpoint __meta__ has wrong shape");

  Genome genome;
  genome.space_version = int(meta.data[0]);
  for (double d : genes_it->second.data) genome.genes.push_back(int(d));
  const std::uint64_t seed = (std::uint64_t(std::uint32_t(meta.data[4])) << 32) |
                             std::uint64_t(std::uint32_t(meta.data[5]));

  ModelInstance m = instantiate(space, genome, std::int64_t(meta.data[1]),
                                std::int64_t(meta.data[2]),
                                std::int64_t(meta.data[3]), seed);
  for (std::size_t k = 0; k < m.names.size(); ++k) {
    auto it = arrays.find(m.names[k]);
    if (it == arrays.end())
      throw Error(errc::IoError,
                  "checkpoint lacks weight '" + m.names[k] + "'");
    if (!it->second.same_shape(m.weights[k]))
      throw Error(errc::IoError,
                  "checkpoint weight '" + m.names[k] + "' has shape " +
                      it->second.shape_str() + ", expected " +
                      m.weights[k].shape_str());
    m.weights[k] = std::move(it->second);
  }
  return m;
}

}  // namespace gnnuq
