#pragma once

// The architecture search space: genomes over the variable nodes of the
// MPNN template (per-stage message-passing choices, skip connections, and
// the graph-gather operation), plus mutation and JSON (de)serialization.

#include <gnnuq/diffcore.hpp>
#include <gnnuq/error.hpp>
#include <gnnuq/rng.hpp>

#include <json.hpp>

#include <cstdint>
#include <string>
#include <type_traits>
#include <vector>

namespace gnnuq {

// ---------------------------------------------------------------------------
// Gene option enums. Values match the option order below, which is the order
// genes are serialized in, so keep the three in sync.

enum class AttentionKind { Constant, Gat, SymGat, Cos, Linear, GenLinear };
enum class Aggregate { Mean, Sum, Max };
enum class Update { Gru, Mlp };
enum class SkipKind { None, OneBack, TwoBack };
enum class GatherKind {
  PoolSum,
  PoolMean,
  PoolMax,
  GatherSum,
  GatherMean,
  GatherMax,
  AttnPool16,
  AttnPool32,
  AttnPool64,
  AttnSumPool,
  Flatten,
};

inline std::int64_t attn_pool_dim(GatherKind g) {
  switch (g) {
    case GatherKind::AttnPool16: return 16;
    case GatherKind::AttnPool32: return 32;
    case GatherKind::AttnPool64: return 64;
    default: return 0;
  }
}

// ---------------------------------------------------------------------------
// Search space

struct GeneDesc {
  std::string name;
  std::vector<std::string> options;
};

struct Genome {
  std::vector<int> genes;
  int space_version = 1;
  bool operator==(const Genome&) const = default;
};

class SearchSpace {
 public:
  // Arbitrary gene list, for reduced or experimental spaces.
  explicit SearchSpace(std::vector<GeneDesc> genes, int version = 1)
      : genes_(std::move(genes)), version_(version) {}

  // The paper's space: n_stages MPNN stages of 6 genes each, one skip gene
  // per stage, and the gather gene. 22 genes for the default 3 stages.
  static SearchSpace mpnn(int n_stages, bool with_skips, bool with_gather,
                          int version = 1) {
    std::vector<GeneDesc> genes;
    for (int t = 0; t < n_stages; ++t) {
      const std::string p = "stage" + std::to_string(t + 1) + ".";
      genes.push_back({p + "hidden_dim", {"8", "16", "32", "64"}});
      genes.push_back({p + "attention",
                       {"constant", "gat", "sym-gat", "cos", "linear",
                        "gen-linear"}});
      genes.push_back({p + "heads", {"1", "2", "3"}});
      genes.push_back({p + "aggregate", {"mean", "sum", "max"}});
      genes.push_back({p + "activation",
                       {"sigmoid", "tanh", "relu", "linear", "softplus",
                        "leakyrelu", "relu6", "elu"}});
      genes.push_back({p + "update", {"gru", "mlp"}});
    }
    if (with_skips)
      for (int t = 0; t < n_stages; ++t)
        genes.push_back({"skip" + std::to_string(t + 1),
                         {"none", "from-1-back", "from-2-back"}});
    if (with_gather)
      genes.push_back({"gather",
                       {"pool-sum", "pool-mean", "pool-max", "gather-sum",
                        "gather-mean", "gather-max", "attn-pool-16",
                        "attn-pool-32", "attn-pool-64", "attn-sum-pool",
                        "flatten"}});
    SearchSpace s(std::move(genes), version);
    s.n_stages_ = n_stages;
    s.has_skips_ = with_skips;
    s.has_gather_ = with_gather;
    return s;
  }

  static SearchSpace standard() { return mpnn(3, true, true); }

  const std::vector<GeneDesc>& genes() const { return genes_; }
  std::size_t size() const { return genes_.size(); }
  int version() const { return version_; }
  int n_stages() const { return n_stages_; }
  bool has_skips() const { return has_skips_; }
  bool has_gather() const { return has_gather_; }

  // Exact product of option counts; the default space has ~1.2e13 points,
  // far below the 64-bit limit, but the multiply is checked anyway.
  std::uint64_t cardinality() const {
    unsigned __int128 product = 1;
    for (const GeneDesc& g : genes_) {
      product *= static_cast<unsigned __int128>(g.options.size());
      if (product > static_cast<unsigned __int128>(UINT64_MAX))
        throw Error(errc::Overflow,
                    "search-space cardinality exceeds 64 bits");
    }
    return static_cast<std::uint64_t>(product);
  }

  Genome random_genome(SplitMix64& rng) const {
    Genome g;
    g.space_version = version_;
    g.genes.reserve(genes_.size());
    for (const GeneDesc& d : genes_)
      g.genes.push_back(int(rng.next_index(d.options.size())));
    return g;
  }

  // One uniformly chosen gene is resampled uniformly among its *other*
  // options, so the child never equals the parent. Genes with a single
  // option cannot change and are excluded from the index draw.
  Genome mutate(const Genome& parent, SplitMix64& rng) const {
    validate(parent);
    std::vector<std::size_t> mutable_idx;
    for (std::size_t k = 0; k < genes_.size(); ++k)
      if (genes_[k].options.size() >= 2) mutable_idx.push_back(k);
    if (mutable_idx.empty())
      throw Error(errc::GeneOutOfRange,
                  "space has no gene with at least two options to mutate");
    Genome child = parent;
    const std::size_t idx = mutable_idx[rng.next_index(mutable_idx.size())];
    const auto n_opts = genes_[idx].options.size();
    auto pick = rng.next_index(n_opts - 1);
    if (int(pick) >= parent.genes[idx]) ++pick;
    child.genes[idx] = int(pick);
    return child;
  }

  void validate(const Genome& g) const {
    if (g.space_version != version_)
      throw Error(errc::VersionMismatch,
                  "genome has space_version " +
                      std::to_string(g.space_version) + ", expected " +
                      std::to_string(version_));
    if (g.genes.size() != genes_.size())
      throw Error(errc::GeneOutOfRange,
                  "genome has " + std::to_string(g.genes.size()) +
                      " genes, expected " + std::to_string(genes_.size()));
    for (std::size_t k = 0; k < genes_.size(); ++k)
      if (g.genes[k] < 0 ||
          std::size_t(g.genes[k]) >= genes_[k].options.size())
        throw Error(errc::GeneOutOfRange,
                    "gene '" + genes_[k].name + "' has value " +
                        std::to_string(g.genes[k]) + " but only " +
                        std::to_string(genes_[k].options.size()) +
                        " options");
  }

 private:
  std::vector<GeneDesc> genes_;
  int version_ = 1;
  // Layout metadata, set by the mpnn() factory; interpret() needs it.
  int n_stages_ = 0;
  bool has_skips_ = false;
  bool has_gather_ = false;
};

// ---------------------------------------------------------------------------
// Genome JSON: {"space_version":1,"genes":[...]}

inline nlohmann::ordered_json encode_genome(const Genome& g) {
  nlohmann::ordered_json j;
  j["space_version"] = g.space_version;
  j["genes"] = g.genes;
  return j;
}

// Accepts both nlohmann::json and nlohmann::ordered_json; a plain overload
// would be ambiguous against the string one because basic_json converts to
// either parameter type.
template <typename Json,
          typename = std::enable_if_t<nlohmann::detail::is_basic_json<Json>::value>>
inline Genome decode_genome(const Json& j, const SearchSpace& space) {
  if (!j.is_object() || !j.contains("space_version") || !j.contains("genes"))
    throw Error(errc::MalformedJson,
                "genome JSON needs 'space_version' and 'genes'");
  Genome g;
  try {
    g.space_version = j.at("space_version").template get<int>();
    g.genes = j.at("genes").template get<std::vector<int>>();
  } catch (const nlohmann::detail::exception& err) {
    throw Error(errc::MalformedJson,
                std::string("genome JSON: ") + err.what());
  }
  space.validate(g);
  return g;
}

inline Genome decode_genome(const std::string& text,
                            const SearchSpace& space) {
  nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
  if (j.is_discarded())
    throw Error(errc::MalformedJson, "genome JSON does not parse");
  return decode_genome(j, space);
}

// ---------------------------------------------------------------------------
// Decoded view of an mpnn()-layout genome, the form the model builder uses.

struct StageGenes {
  std::int64_t hidden_dim = 0;
  AttentionKind attention = AttentionKind::Constant;
  int heads = 1;
  Aggregate aggregate = Aggregate::Mean;
  Act activation = Act::Sigmoid;
  Update update = Update::Gru;
};

struct ArchGenes {
  std::vector<StageGenes> stages;
  std::vector<SkipKind> skips;   // empty when the space has no skip genes
  GatherKind gather = GatherKind::PoolSum;
  bool has_gather = false;
};

inline ArchGenes interpret(const SearchSpace& space, const Genome& genome) {
  space.validate(genome);
  if (space.n_stages() == 0)
    throw Error(errc::GeneOutOfRange,
                "genome interpretation needs an mpnn()-layout space");
  ArchGenes out;
  std::size_t k = 0;
  for (int t = 0; t < space.n_stages(); ++t) {
    StageGenes s;
    s.hidden_dim = std::int64_t(8) << genome.genes[k++];
    s.attention = AttentionKind(genome.genes[k++]);
    s.heads = genome.genes[k++] + 1;
    s.aggregate = Aggregate(genome.genes[k++]);
    s.activation = Act(genome.genes[k++]);
    s.update = Update(genome.genes[k++]);
    out.stages.push_back(s);
  }
  if (space.has_skips())
    for (int t = 0; t < space.n_stages(); ++t)
      out.skips.push_back(SkipKind(genome.genes[k++]));
  if (space.has_gather()) {
    out.gather = GatherKind(genome.genes[k++]);
    out.has_gather = true;
  }
  return out;
}

}  // namespace gnnuq
