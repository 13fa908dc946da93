#include <catch2/catch_amalgamated.hpp>

#include <set>
#include <string>
#include <vector>

#include "gnnuq/archspace.hpp"
#include "gnnuq/rng.hpp"

using namespace gnnuq;

namespace {

struct HasCode : Catch::Matchers::MatcherGenericBase {
  errc code;
  explicit HasCode(errc c) : code(c) {}
  bool match(const Error& err) const { return err.code() == code; }
  std::string describe() const override {
    return std::string("has error code ") + errc_name(code);
  }
};

int hamming(const Genome& a, const Genome& b) {
  REQUIRE(a.genes.size() == b.genes.size());
  int d = 0;
  for (std::size_t k = 0; k < a.genes.size(); ++k)
    if (a.genes[k] != b.genes[k]) ++d;
  return d;
}

}  // namespace

TEST_CASE("standard space shape") {
  SearchSpace space = SearchSpace::standard();
  REQUIRE(space.size() == 22);  // 3*6 + 3 + 1
  CHECK(space.genes()[0].name == "stage1.hidden_dim");
  CHECK(space.genes()[0].options.size() == 4);
  CHECK(space.genes()[1].options.size() == 6);
  CHECK(space.genes()[2].options.size() == 3);
  CHECK(space.genes()[3].options.size() == 3);
  CHECK(space.genes()[4].options.size() == 8);
  CHECK(space.genes()[5].options.size() == 2);
  CHECK(space.genes()[18].name == "skip1");
  CHECK(space.genes()[18].options.size() == 3);
  CHECK(space.genes()[21].name == "gather");
  CHECK(space.genes()[21].options.size() == 11);
}

TEST_CASE("cardinality of the standard space matches the closed form") {
  CHECK(SearchSpace::standard().cardinality() == 12'259'638'116'352ULL);
}

TEST_CASE("cardinality of reduced spaces") {
  // one MPNN stage, no skips, gather: 4*6*3*3*8*2 * 11
  CHECK(SearchSpace::mpnn(1, false, true).cardinality() == 38'016ULL);
  CHECK(SearchSpace::mpnn(1, false, false).cardinality() == 3'456ULL);

  SearchSpace one_gene(std::vector<GeneDesc>{{"only", {"x"}}});
  CHECK(one_gene.cardinality() == 1ULL);
}

TEST_CASE("cardinality overflow guard") {
  // 33 ten-option genes exceed 2^64
  std::vector<GeneDesc> genes;
  for (int k = 0; k < 33; ++k)
    genes.push_back({"g" + std::to_string(k),
                     {"0", "1", "2", "3", "4", "5", "6", "7", "8", "9"}});
  SearchSpace huge((std::vector<GeneDesc>(genes)));
  CHECK_THROWS_MATCHES(huge.cardinality(), Error, HasCode(errc::Overflow));
}

TEST_CASE("random_genome is deterministic and in bounds") {
  SearchSpace space = SearchSpace::standard();

  SplitMix64 a(1234), b(1234);
  CHECK(space.random_genome(a) == space.random_genome(b));

  SplitMix64 rng(55);
  for (int rep = 0; rep < 1000; ++rep) {
    Genome g = space.random_genome(rng);
    REQUIRE(g.genes.size() == 22);
    CHECK(g.space_version == 1);
    for (std::size_t k = 0; k < g.genes.size(); ++k) {
      CHECK(g.genes[k] >= 0);
      CHECK(std::size_t(g.genes[k]) < space.genes()[k].options.size());
    }
  }
}

TEST_CASE("random_genome samples each option of a 2-option gene evenly") {
  SearchSpace space = SearchSpace::standard();
  SplitMix64 rng(2024);
  const std::size_t update_gene = 5;  // stage1.update, options {gru, mlp}
  int count[2] = {0, 0};
  const int draws = 10'000;
  for (int rep = 0; rep < draws; ++rep)
    ++count[space.random_genome(rng).genes[update_gene]];
  CHECK(count[0] + count[1] == draws);
  CHECK(count[0] >= int(0.45 * draws));
  CHECK(count[0] <= int(0.55 * draws));
}

TEST_CASE("mutate changes exactly one gene and never returns the parent") {
  SearchSpace space = SearchSpace::standard();
  SplitMix64 rng(7);
  Genome parent = space.random_genome(rng);

  std::set<std::size_t> touched;
  for (int rep = 0; rep < 1000; ++rep) {
    Genome child = space.mutate(parent, rng);
    REQUIRE(hamming(parent, child) == 1);
    CHECK_FALSE(child == parent);
    for (std::size_t k = 0; k < child.genes.size(); ++k)
      if (child.genes[k] != parent.genes[k]) {
        touched.insert(k);
        CHECK(std::size_t(child.genes[k]) <
              space.genes()[k].options.size());
      }
  }
  // coupon collector: 1000 draws over 22 genes hit every index
  CHECK(touched.size() == space.size());
}

TEST_CASE("mutating a 2-option gene flips it") {
  SearchSpace space(std::vector<GeneDesc>{{"bit", {"off", "on"}}});
  SplitMix64 rng(0);
  Genome parent{{0}, 1};
  for (int rep = 0; rep < 10; ++rep) {
    Genome child = space.mutate(parent, rng);
    CHECK(child.genes[0] == 1 - parent.genes[0]);
    parent = child;
  }
}

TEST_CASE("single-option genes are never selected for mutation") {
  SearchSpace space(std::vector<GeneDesc>{
      {"frozen", {"only"}}, {"live", {"a", "b", "c"}}});
  SplitMix64 rng(11);
  Genome parent{{0, 1}, 1};
  for (int rep = 0; rep < 50; ++rep) {
    Genome child = space.mutate(parent, rng);
    CHECK(child.genes[0] == 0);
    CHECK(child.genes[1] != parent.genes[1]);
  }
}

TEST_CASE("genome JSON round trip") {
  SearchSpace space = SearchSpace::standard();
  SplitMix64 rng(31337);
  for (int rep = 0; rep < 100; ++rep) {
    Genome g = space.random_genome(rng);
    nlohmann::ordered_json j = encode_genome(g);
    CHECK(decode_genome(j, space) == g);
    CHECK(decode_genome(j.dump(), space) == g);
  }
  // serialized shape
  Genome g = space.random_genome(rng);
  nlohmann::ordered_json j = encode_genome(g);
  CHECK(j.contains("space_version"));
  CHECK(j["genes"].size() == 22);
}

TEST_CASE("genome JSON error cases") {
  SearchSpace space = SearchSpace::standard();
  SplitMix64 rng(1);
  Genome good = space.random_genome(rng);

  SECTION("out-of-range gene value") {
    Genome bad = good;
    bad.genes[2] = 99;  // heads has 3 options
    CHECK_THROWS_MATCHES(decode_genome(encode_genome(bad), space), Error,
                         HasCode(errc::GeneOutOfRange));
  }
  SECTION("negative gene value") {
    Genome bad = good;
    bad.genes[0] = -1;
    CHECK_THROWS_MATCHES(decode_genome(encode_genome(bad), space), Error,
                         HasCode(errc::GeneOutOfRange));
  }
  SECTION("wrong gene count") {
    nlohmann::json j = encode_genome(good);
    j["genes"].erase(21);
    CHECK_THROWS_MATCHES(decode_genome(j, space), Error,
                         HasCode(errc::GeneOutOfRange));
  }
  SECTION("missing space_version") {
    nlohmann::json j = encode_genome(good);
    j.erase("space_version");
    CHECK_THROWS_MATCHES(decode_genome(j, space), Error,
                         HasCode(errc::MalformedJson));
  }
  SECTION("version mismatch") {
    nlohmann::json j = encode_genome(good);
    j["space_version"] = 2;
    CHECK_THROWS_MATCHES(decode_genome(j, space), Error,
                         HasCode(errc::VersionMismatch));
  }
  SECTION("not JSON at all") {
    CHECK_THROWS_MATCHES(decode_genome(std::string("genes: lots"), space),
                         Error, HasCode(errc::MalformedJson));
  }
  SECTION("genes not an array of ints") {
    CHECK_THROWS_MATCHES(
        decode_genome(std::string(R"({"space_version":1,"genes":"xyz"})"),
                      space),
        Error, HasCode(errc::MalformedJson));
  }
}

TEST_CASE("interpret decodes an mpnn-layout genome") {
  SearchSpace space = SearchSpace::standard();
  // stage genes: [hidden, attention, heads, aggregate, activation, update]
  Genome g;
  g.genes = {
      0, 0, 0, 0, 0, 0,   // stage 1: 8, constant, 1 head, mean, sigmoid, gru
      2, 1, 1, 1, 2, 1,   // stage 2: 32, gat, 2 heads, sum, relu, mlp
      3, 5, 2, 2, 7, 0,   // stage 3: 64, gen-linear, 3 heads, max, elu, gru
      0, 1, 2,            // skips: none, 1-back, 2-back
      6,                  // gather: attn-pool-16
  };
  ArchGenes a = interpret(space, g);
  REQUIRE(a.stages.size() == 3);
  CHECK(a.stages[0].hidden_dim == 8);
  CHECK(a.stages[0].attention == AttentionKind::Constant);
  CHECK(a.stages[0].heads == 1);
  CHECK(a.stages[0].aggregate == Aggregate::Mean);
  CHECK(a.stages[0].activation == Act::Sigmoid);
  CHECK(a.stages[0].update == Update::Gru);
  CHECK(a.stages[1].hidden_dim == 32);
  CHECK(a.stages[1].attention == AttentionKind::Gat);
  CHECK(a.stages[1].heads == 2);
  CHECK(a.stages[1].aggregate == Aggregate::Sum);
  CHECK(a.stages[1].activation == Act::Relu);
  CHECK(a.stages[1].update == Update::Mlp);
  CHECK(a.stages[2].hidden_dim == 64);
  CHECK(a.stages[2].attention == AttentionKind::GenLinear);
  CHECK(a.stages[2].heads == 3);
  CHECK(a.stages[2].aggregate == Aggregate::Max);
  CHECK(a.stages[2].activation == Act::Elu);
  CHECK(a.stages[2].update == Update::Gru);
  REQUIRE(a.skips.size() == 3);
  CHECK(a.skips[0] == SkipKind::None);
  CHECK(a.skips[1] == SkipKind::OneBack);
  CHECK(a.skips[2] == SkipKind::TwoBack);
  CHECK(a.has_gather);
  CHECK(a.gather == GatherKind::AttnPool16);
  CHECK(attn_pool_dim(a.gather) == 16);
  CHECK(attn_pool_dim(GatherKind::AttnPool64) == 64);
  CHECK(attn_pool_dim(GatherKind::Flatten) == 0);
}
