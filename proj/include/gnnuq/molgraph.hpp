#pragma once

// SMILES -> heavy-atom molecular graphs, the fixed-size featurization the
// models consume, and the dataset plumbing around them (CSV loading, seeded
// splits, target standardization).
//
// The parser covers the subset of SMILES that the benchmark datasets actually
// use: organic-subset atoms, bracket atoms, bonds - = # :, aromatic lowercase
// atoms, branches, ring closures (digits and %nn), dot-separated fragments,
// and stereo markers / \ @ which are accepted and discarded. Implicit
// hydrogens are never materialized as nodes. There is no valence model and no
// sanitization; malformed input fails with a byte offset, chemically dubious
// input does not.

#include <gnnuq/error.hpp>
#include <gnnuq/rng.hpp>
#include <gnnuq/tensor.hpp>

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace gnnuq {

// ---------------------------------------------------------------------------
// Molecule types

struct AtomSpec {
  int z = 0;               // atomic number
  bool aromatic = false;
};

struct BondSpec {
  std::int32_t i = 0;      // endpoint atom indices, i != j
  std::int32_t j = 0;
  double order = 1.0;      // one of {1, 1.5, 2, 3}; 1.5 iff aromatic
};

struct MolSpec {
  std::vector<AtomSpec> atoms;
  std::vector<BondSpec> bonds;
};

// Symbol -> atomic number for every element, so bracket atoms like [Se] or
// [Pt] parse even though only the ten organic-subset elements get a one-hot
// feature slot.
inline const std::unordered_map<std::string, int>& element_numbers() {
  static const std::unordered_map<std::string, int> table = [] {
    static constexpr const char* names[] = {
        "H",  "He", "Li", "Be", "B",  "C",  "N",  "O",  "F",  "Ne", "Na",
        "Mg", "Al", "Si", "P",  "S",  "Cl", "Ar", "K",  "Ca", "Sc", "Ti",
        "V",  "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As",
        "Se", "Br", "Kr", "Rb", "Sr", "Y",  "Zr", "Nb", "Mo", "Tc", "Ru",
        "Rh", "Pd", "Ag", "Cd", "In", "Sn", "Sb", "Te", "I",  "Xe", "Cs",
        "Ba", "La", "Ce", "Pr", "Nd", "Pm", "Sm", "Eu", "Gd", "Tb", "Dy",
        "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W",  "Re", "Os", "Ir",
        "Pt", "Au", "Hg", "Tl", "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra",
        "Ac", "Th", "Pa", "U",  "Np", "Pu", "Am", "Cm", "Bk", "Cf", "Es",
        "Fm", "Md", "No", "Lr", "Rf", "Db", "Sg", "Bh", "Hs", "Mt", "Ds",
        "Rg", "Cn", "Nh", "Fl", "Mc", "Lv", "Ts", "Og"};
    std::unordered_map<std::string, int> t;
    int z = 1;
    for (const char* name : names) t.emplace(name, z++);
    return t;
  }();
  return table;
}

namespace detail {

inline bool is_digit(char c) { return c >= '0' && c <= '9'; }
inline bool is_upper(char c) { return c >= 'A' && c <= 'Z'; }
inline bool is_lower(char c) { return c >= 'a' && c <= 'z'; }
inline bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\r' || c == '\n' || c == '\f' ||
         c == '\v';
}

// Aromatic lowercase symbols allowed by the Daylight grammar.
inline int aromatic_z(std::string_view sym) {
  if (sym == "b") return 5;
  if (sym == "c") return 6;
  if (sym == "n") return 7;
  if (sym == "o") return 8;
  if (sym == "p") return 15;
  if (sym == "s") return 16;
  if (sym == "se") return 34;
  if (sym == "as") return 33;
  return 0;
}

}  // namespace detail

inline MolSpec parse_smiles(std::string_view text) {
  using detail::is_digit;
  using detail::is_lower;
  using detail::is_upper;

  // CSV cells often carry stray surrounding whitespace; byte offsets in
  // errors still refer to the original string.
  std::size_t begin = 0, end = text.size();
  while (begin < end && detail::is_space(text[begin])) ++begin;
  while (end > begin && detail::is_space(text[end - 1])) --end;
  if (begin == end) throw Error(errc::EmptyInput, "empty SMILES string", 0);

  MolSpec spec;

  // Parser state: `prev` is the atom new bonds attach to (-1 at the start and
  // after '.'), `pending` is an explicit bond symbol waiting for its second
  // endpoint, `branches` holds attachment points saved by '(' and `rings`
  // the currently open ring-closure labels.
  std::int32_t prev = -1;
  struct Pending {
    double order = 0.0;
    bool active = false;
    std::size_t offset = 0;
  } pending;
  struct Branch {
    std::int32_t atom;
    std::size_t offset;
  };
  std::vector<Branch> branches;
  struct OpenRing {
    std::int32_t atom;
    Pending bond;      // explicit bond symbol on the opening side, if any
    std::size_t offset;
  };
  std::map<int, OpenRing> rings;

  // Bonds written without a symbol between two aromatic atoms are 1.5 only
  // if they turn out to lie in a ring; `implicit_aromatic` marks them for the
  // bridge check after parsing (biphenyl written as c1ccccc1c2ccccc2 gets a
  // single bond between the rings).
  std::vector<bool> implicit_aromatic;

  auto add_bond = [&](std::int32_t a, std::int32_t b, double order,
                      std::size_t off, bool implicit) {
    if (a == b)
      throw Error(errc::UnsupportedToken, "ring bond joins an atom to itself",
                  off);
    for (const BondSpec& bd : spec.bonds)
      if ((bd.i == a && bd.j == b) || (bd.i == b && bd.j == a))
        throw Error(errc::UnsupportedToken, "duplicate bond between atoms",
                    off);
    if (order == 1.5 &&
        !(spec.atoms[std::size_t(a)].aromatic &&
          spec.atoms[std::size_t(b)].aromatic))
      throw Error(errc::UnsupportedToken,
                  "aromatic bond requires aromatic atoms at both ends", off);
    spec.bonds.push_back({a, b, order});
    implicit_aromatic.push_back(implicit && order == 1.5);
  };

  auto add_atom = [&](int z, bool aromatic, std::size_t off) {
    spec.atoms.push_back({z, aromatic});
    const auto id = static_cast<std::int32_t>(spec.atoms.size()) - 1;
    if (prev >= 0) {
      if (pending.active)
        add_bond(prev, id, pending.order, off, false);
      else
        add_bond(prev, id,
                 spec.atoms[std::size_t(prev)].aromatic && aromatic ? 1.5
                                                                    : 1.0,
                 off, true);
    } else if (pending.active) {
      throw Error(errc::UnsupportedToken, "bond symbol with no atom before it",
                  pending.offset);
    }
    pending = Pending{};
    prev = id;
  };

  auto close_ring = [&](int label, std::size_t off) {
    auto it = rings.find(label);
    if (it == rings.end()) {
      // Opening a new ring label consumes any pending bond symbol; the order
      // is resolved when the label closes.
      rings.emplace(label, OpenRing{prev, pending, off});
      pending = Pending{};
      return;
    }
    OpenRing open = it->second;
    rings.erase(it);
    if (pending.active && open.bond.active && pending.order != open.bond.order)
      throw Error(errc::UnsupportedToken,
                  "ring closure with conflicting bond orders", off);
    if (pending.active)
      add_bond(open.atom, prev, pending.order, off, false);
    else if (open.bond.active)
      add_bond(open.atom, prev, open.bond.order, off, false);
    else
      add_bond(open.atom, prev,
               (spec.atoms[std::size_t(open.atom)].aromatic &&
                spec.atoms[std::size_t(prev)].aromatic)
                   ? 1.5
                   : 1.0,
               off, true);
    pending = Pending{};
  };

  std::size_t i = begin;
  const auto& elements = element_numbers();
  while (i < end) {
    const char c = text[i];

    // --- organic-subset atoms -------------------------------------------
    if (is_upper(c)) {
      if (c == 'C' && i + 1 < end && text[i + 1] == 'l') {
        add_atom(17, false, i);
        i += 2;
        continue;
      }
      if (c == 'B' && i + 1 < end && text[i + 1] == 'r') {
        add_atom(35, false, i);
        i += 2;
        continue;
      }
      int z = 0;
      switch (c) {
        case 'B': z = 5; break;
        case 'C': z = 6; break;
        case 'N': z = 7; break;
        case 'O': z = 8; break;
        case 'P': z = 15; break;
        case 'S': z = 16; break;
        case 'F': z = 9; break;
        case 'I': z = 53; break;
        default:
          throw Error(errc::UnsupportedToken,
                      std::string("element '") + c +
                          "' needs brackets outside the organic subset",
                      i);
      }
      add_atom(z, false, i);
      ++i;
      continue;
    }
    if (is_lower(c)) {
      int z = detail::aromatic_z(std::string_view(&text[i], 1));
      if (z == 0)
        throw Error(errc::UnsupportedToken,
                    std::string("unknown aromatic atom '") + c + "'", i);
      add_atom(z, true, i);
      ++i;
      continue;
    }

    // --- bracket atoms ---------------------------------------------------
    if (c == '[') {
      const std::size_t start = i++;
      while (i < end && is_digit(text[i])) ++i;  // isotope label, discarded
      if (i >= end)
        throw Error(errc::UnsupportedToken, "unterminated bracket atom",
                    start);
      int z = 0;
      bool aromatic = false;
      if (is_upper(text[i])) {
        std::string sym(1, text[i]);
        if (i + 1 < end && is_lower(text[i + 1]) &&
            elements.count(sym + text[i + 1]))
          sym += text[++i];
        ++i;
        auto it = elements.find(sym);
        if (it == elements.end())
          throw Error(errc::UnsupportedToken,
                      "unknown element symbol '" + sym + "'", start);
        z = it->second;
      } else if (is_lower(text[i])) {
        std::string sym(1, text[i]);
        if (i + 1 < end && is_lower(text[i + 1]) &&
            detail::aromatic_z(sym + text[i + 1]))
          sym += text[++i];
        ++i;
        z = detail::aromatic_z(sym);
        if (z == 0)
          throw Error(errc::UnsupportedToken,
                      "unknown aromatic atom '" + sym + "'", start);
        aromatic = true;
      } else {
        throw Error(errc::UnsupportedToken,
                    "expected an element symbol after '['", i);
      }
      // Chirality, hydrogen count, and charge are parsed then discarded:
      // only the atomic number feeds the featurization.
      while (i < end && text[i] != ']') {
        const char t = text[i];
        if (t == '@') {
          ++i;
        } else if (t == 'H') {
          ++i;
          while (i < end && is_digit(text[i])) ++i;
        } else if (t == '+' || t == '-') {
          ++i;
          while (i < end && (text[i] == t || is_digit(text[i]))) ++i;
        } else {
          throw Error(errc::UnsupportedToken,
                      std::string("unsupported token '") + t +
                          "' inside bracket atom",
                      i);
        }
      }
      if (i >= end)
        throw Error(errc::UnsupportedToken, "unterminated bracket atom",
                    start);
      ++i;  // ']'
      add_atom(z, aromatic, start);
      continue;
    }

    // --- everything that needs an atom on the left ------------------------
    if (c == '-' || c == '=' || c == '#' || c == ':' || c == '/' ||
        c == '\\') {
      if (pending.active)
        throw Error(errc::UnsupportedToken, "two bond symbols in a row", i);
      double order = 1.0;  // '-', '/' and '\' all mean a single bond
      if (c == '=') order = 2.0;
      if (c == '#') order = 3.0;
      if (c == ':') order = 1.5;
      pending = Pending{order, true, i};
      ++i;
      continue;
    }
    if (is_digit(c) || c == '%') {
      if (prev < 0)
        throw Error(errc::UnsupportedToken,
                    "ring-closure digit before any atom", i);
      int label;
      std::size_t off = i;
      if (c == '%') {
        if (i + 2 >= end || !is_digit(text[i + 1]) || !is_digit(text[i + 2]))
          throw Error(errc::UnsupportedToken,
                      "'%' ring closure needs two digits", i);
        label = (text[i + 1] - '0') * 10 + (text[i + 2] - '0');
        i += 3;
      } else {
        label = c - '0';
        ++i;
      }
      close_ring(label, off);
      continue;
    }
    if (c == '(') {
      if (prev < 0)
        throw Error(errc::UnsupportedToken, "branch before any atom", i);
      if (pending.active)
        throw Error(errc::UnsupportedToken, "bond symbol before '('",
                    pending.offset);
      branches.push_back({prev, i});
      ++i;
      continue;
    }
    if (c == ')') {
      if (branches.empty())
        throw Error(errc::UnbalancedParen, "')' without matching '('", i);
      if (pending.active)
        throw Error(errc::UnsupportedToken, "dangling bond symbol",
                    pending.offset);
      prev = branches.back().atom;
      branches.pop_back();
      ++i;
      continue;
    }
    if (c == '.') {
      if (pending.active)
        throw Error(errc::UnsupportedToken, "bond symbol before '.'",
                    pending.offset);
      prev = -1;
      ++i;
      continue;
    }
    throw Error(errc::UnsupportedToken,
                std::string("unsupported character '") + c + "'", i);
  }

  if (pending.active)
    throw Error(errc::UnsupportedToken, "dangling bond symbol at end of input",
                pending.offset);
  if (!rings.empty()) {
    std::size_t off = rings.begin()->second.offset;
    for (const auto& [label, open] : rings) off = std::min(off, open.offset);
    throw Error(errc::UnclosedRing, "ring closure never closed", off);
  }
  if (!branches.empty())
    throw Error(errc::UnbalancedParen, "'(' without matching ')'",
                branches.back().offset);
  if (spec.atoms.empty())
    throw Error(errc::EmptyInput, "SMILES contains no atoms", begin);

  // Demote implicit aromatic bonds that are bridges (not part of any ring)
  // to single bonds. Low-link DFS, iterative so pathological chains cannot
  // exhaust the stack.
  if (std::find(implicit_aromatic.begin(), implicit_aromatic.end(), true) !=
      implicit_aromatic.end()) {
    const std::size_t na = spec.atoms.size();
    std::vector<std::vector<std::pair<std::int32_t, std::int32_t>>> adj(na);
    for (std::size_t b = 0; b < spec.bonds.size(); ++b) {
      const BondSpec& bd = spec.bonds[b];
      adj[std::size_t(bd.i)].push_back({bd.j, std::int32_t(b)});
      adj[std::size_t(bd.j)].push_back({bd.i, std::int32_t(b)});
    }
    std::vector<int> tin(na, -1), low(na, 0);
    std::vector<bool> is_bridge(spec.bonds.size(), false);
    int timer = 0;
    struct Frame {
      std::int32_t v;
      std::int32_t via_bond;  // bond used to enter v, -1 at roots
      std::size_t next = 0;   // next adjacency entry to visit
    };
    std::vector<Frame> stack;
    for (std::size_t root = 0; root < na; ++root) {
      if (tin[root] != -1) continue;
      tin[root] = low[root] = timer++;
      stack.push_back({std::int32_t(root), -1});
      while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < adj[std::size_t(f.v)].size()) {
          auto [u, b] = adj[std::size_t(f.v)][f.next++];
          if (b == f.via_bond) continue;
          if (tin[std::size_t(u)] != -1) {
            low[std::size_t(f.v)] =
                std::min(low[std::size_t(f.v)], tin[std::size_t(u)]);
          } else {
            tin[std::size_t(u)] = low[std::size_t(u)] = timer++;
            stack.push_back({u, b});
          }
        } else {
          Frame done = f;
          stack.pop_back();
          if (!stack.empty()) {
            Frame& parent = stack.back();
            low[std::size_t(parent.v)] = std::min(low[std::size_t(parent.v)],
                                                  low[std::size_t(done.v)]);
            if (low[std::size_t(done.v)] > tin[std::size_t(parent.v)])
              is_bridge[std::size_t(done.via_bond)] = true;
          }
        }
      }
    }
    for (std::size_t b = 0; b < spec.bonds.size(); ++b)
      if (implicit_aromatic[b] && is_bridge[b]) spec.bonds[b].order = 1.0;
  }
  return spec;
}

// ---------------------------------------------------------------------------
// Featurization

inline constexpr std::int64_t kNodeFeatureDim = 12;
inline constexpr std::int64_t kEdgeFeatureDim = 4;

// One-hot slot for {B, C, N, O, F, P, S, Cl, Br, I}; -1 for everything else
// (such atoms are described only by the aromatic flag and Z/100).
inline int atom_onehot_slot(int z) {
  switch (z) {
    case 5: return 0;
    case 6: return 1;
    case 7: return 2;
    case 8: return 3;
    case 9: return 4;
    case 15: return 5;
    case 16: return 6;
    case 17: return 7;
    case 35: return 8;
    case 53: return 9;
    default: return -1;
  }
}

// Fixed-shape padded graph. Edge row r runs from node edge_src[r] into node
// edge_dst[r]; each undirected bond contributes both directions. Padded rows
// are all-zero with masks 0 and point at node 0.
struct MolGraph {
  Tensor H;                             // [n_max, kNodeFeatureDim]
  Tensor E;                             // [e_max, kEdgeFeatureDim]
  std::vector<std::int32_t> edge_src;   // length e_max
  std::vector<std::int32_t> edge_dst;   // length e_max
  std::vector<double> node_mask;        // length n_max, entries in {0,1}
  std::vector<double> edge_mask;        // length e_max
  std::int64_t n_real = 0;
  std::int64_t e_real = 0;
};

inline MolGraph featurize(const MolSpec& spec, std::int64_t n_max,
                          std::int64_t e_max) {
  const auto n = static_cast<std::int64_t>(spec.atoms.size());
  const auto e = static_cast<std::int64_t>(spec.bonds.size()) * 2;
  if (n > n_max)
    throw Error(errc::CapacityExceeded,
                "molecule has " + std::to_string(n) + " atoms but n_max is " +
                    std::to_string(n_max));
  if (e > e_max)
    throw Error(errc::CapacityExceeded,
                "molecule has " + std::to_string(e) +
                    " directed edges but e_max is " + std::to_string(e_max));

  MolGraph g;
  g.n_real = n;
  g.e_real = e;
  g.H = Tensor::zeros(n_max, kNodeFeatureDim);
  g.E = Tensor::zeros(e_max, kEdgeFeatureDim);
  g.edge_src.assign(std::size_t(e_max), 0);
  g.edge_dst.assign(std::size_t(e_max), 0);
  g.node_mask.assign(std::size_t(n_max), 0.0);
  g.edge_mask.assign(std::size_t(e_max), 0.0);

  for (std::int64_t a = 0; a < n; ++a) {
    const AtomSpec& atom = spec.atoms[std::size_t(a)];
    const int slot = atom_onehot_slot(atom.z);
    if (slot >= 0) g.H.at(a, slot) = 1.0;
    g.H.at(a, 10) = atom.aromatic ? 1.0 : 0.0;
    g.H.at(a, 11) = atom.z / 100.0;
    g.node_mask[std::size_t(a)] = 1.0;
  }

  for (std::size_t b = 0; b < spec.bonds.size(); ++b) {
    const BondSpec& bond = spec.bonds[b];
    std::array<double, kEdgeFeatureDim> feat{};
    if (bond.order == 1.0) feat[0] = 1.0;
    if (bond.order == 2.0) feat[1] = 1.0;
    if (bond.order == 3.0) feat[2] = 1.0;
    if (bond.order == 1.5) feat[3] = 1.0;  // aromatic: no order one-hot
    for (int dir = 0; dir < 2; ++dir) {
      const auto r = static_cast<std::int64_t>(2 * b + std::size_t(dir));
      g.edge_src[std::size_t(r)] = dir == 0 ? bond.i : bond.j;
      g.edge_dst[std::size_t(r)] = dir == 0 ? bond.j : bond.i;
      for (std::int64_t f = 0; f < kEdgeFeatureDim; ++f)
        g.E.at(r, f) = feat[std::size_t(f)];
      g.edge_mask[std::size_t(r)] = 1.0;
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Datasets

struct DataRecord {
  std::string smiles;
  double y = 0.0;
};

struct DatasetMeta {
  std::string target_name;
  std::string unit_label;
  std::int64_t n_max = 0;  // max real-atom count over accepted rows
  std::int64_t e_max = 0;  // max directed-edge count over accepted rows
};

struct Dataset {
  std::vector<DataRecord> records;
  DatasetMeta meta;
  std::vector<std::string> diagnostics;  // one line per rejected row
  std::size_t rejected = 0;
};

namespace detail {

// Minimal RFC 4180 reader: quoted fields may contain commas, newlines and
// doubled quotes; bare CR before LF is swallowed; blank lines are skipped.
inline std::vector<std::vector<std::string>> parse_csv(std::string_view text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false;
  bool line_has_content = false;

  auto end_field = [&] {
    row.push_back(std::move(field));
    field.clear();
  };
  auto end_line = [&] {
    if (line_has_content || !field.empty() || !row.empty()) {
      end_field();
      rows.push_back(std::move(row));
      row.clear();
    }
    line_has_content = false;
  };

  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
    } else if (c == '"') {
      quoted = true;
      line_has_content = true;
    } else if (c == ',') {
      end_field();
      line_has_content = true;
    } else if (c == '\n') {
      end_line();
    } else if (c == '\r') {
      // swallowed; \r\n and stray \r both terminate via the \n branch or EOF
    } else {
      field += c;
      line_has_content = true;
    }
  }
  end_line();
  return rows;
}

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && is_space(s[b])) ++b;
  while (e > b && is_space(s[e - 1])) --e;
  return std::string(s.substr(b, e - b));
}

}  // namespace detail

inline Dataset load_dataset(const std::string& path,
                            const std::string& smiles_column = "smiles",
                            const std::string& target_column = "y",
                            const std::string& unit_label = "") {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw Error(errc::IoError, "cannot open dataset file '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  if (in.bad())
    throw Error(errc::IoError, "read failure on dataset file '" + path + "'");

  auto rows = detail::parse_csv(buf.str());
  if (rows.empty())
    throw Error(errc::NoValidRows, "dataset file '" + path + "' is empty");

  std::vector<std::string> header = rows.front();
  if (!header.empty() && header[0].rfind("\xEF\xBB\xBF", 0) == 0)
    header[0].erase(0, 3);  // UTF-8 BOM

  auto find_column = [&](const std::string& name) {
    for (std::size_t k = 0; k < header.size(); ++k)
      if (detail::trim(header[k]) == name) return k;
    throw Error(errc::MissingColumn,
                "dataset file '" + path + "' has no column '" + name + "'");
  };
  const std::size_t smiles_idx = find_column(smiles_column);
  const std::size_t target_idx = find_column(target_column);

  Dataset ds;
  ds.meta.target_name = target_column;
  ds.meta.unit_label = unit_label;

  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    auto reject = [&](const std::string& why) {
      ds.diagnostics.push_back("row " + std::to_string(r) + ": " + why);
      ++ds.rejected;
    };
    if (row.size() <= std::max(smiles_idx, target_idx)) {
      reject("only " + std::to_string(row.size()) + " fields");
      continue;
    }
    const std::string smiles = detail::trim(row[smiles_idx]);
    const std::string target = detail::trim(row[target_idx]);

    double y = 0.0;
    try {
      std::size_t used = 0;
      y = std::stod(target, &used);
      if (used != target.size()) throw std::invalid_argument(target);
    } catch (const std::exception&) {
      reject("target '" + target + "' is not a number");
      continue;
    }
    if (!std::isfinite(y)) {
      reject("target '" + target + "' is not finite");
      continue;
    }

    MolSpec spec;
    try {
      spec = parse_smiles(smiles);
    } catch (const Error& err) {
      reject("SMILES '" + smiles + "' rejected: " + err.what());
      continue;
    }
    ds.meta.n_max = std::max(ds.meta.n_max,
                             static_cast<std::int64_t>(spec.atoms.size()));
    ds.meta.e_max = std::max(ds.meta.e_max,
                             static_cast<std::int64_t>(spec.bonds.size()) * 2);
    ds.records.push_back({smiles, y});
  }

  if (ds.records.empty())
    throw Error(errc::NoValidRows,
                "dataset file '" + path + "' contains no usable rows");
  return ds;
}

// ---------------------------------------------------------------------------
// Splits

struct SplitSpec {
  std::array<std::int64_t, 3> ratios{5, 2, 3};  // train : val : test
  std::uint64_t seed = 0;
};

struct SplitIndices {
  std::vector<std::size_t> train, val, test;
};

// Seeded Fisher-Yates shuffle of {0..n-1}, then a contiguous cut. Val and
// test get floor(n*r/sum) entries each; train absorbs the remainder.
inline SplitIndices split_dataset(std::size_t n, const SplitSpec& spec) {
  if (n == 0) throw Error(errc::EmptyInput, "cannot split an empty dataset");
  for (auto r : spec.ratios)
    if (r <= 0)
      throw std::invalid_argument("split ratios must be positive integers");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  SplitMix64 rng(spec.seed);
  fisher_yates(order, rng);

  const auto total = static_cast<std::uint64_t>(spec.ratios[0]) +
                     static_cast<std::uint64_t>(spec.ratios[1]) +
                     static_cast<std::uint64_t>(spec.ratios[2]);
  const std::size_t n_val =
      std::size_t(n * static_cast<std::uint64_t>(spec.ratios[1]) / total);
  const std::size_t n_test =
      std::size_t(n * static_cast<std::uint64_t>(spec.ratios[2]) / total);
  const std::size_t n_train = n - n_val - n_test;

  SplitIndices out;
  out.train.assign(order.begin(), order.begin() + std::ptrdiff_t(n_train));
  out.val.assign(order.begin() + std::ptrdiff_t(n_train),
                 order.begin() + std::ptrdiff_t(n_train + n_val));
  out.test.assign(order.begin() + std::ptrdiff_t(n_train + n_val),
                  order.end());
  return out;
}

inline SplitIndices split_dataset(const Dataset& ds, const SplitSpec& spec) {
  return split_dataset(ds.records.size(), spec);
}

// ---------------------------------------------------------------------------
// Target standardization

struct TargetScaler {
  double mean = 0.0;
  double stdev = 1.0;  // population standard deviation, > 0

  double apply(double y) const { return (y - mean) / stdev; }
  double invert_mu(double mu) const { return mu * stdev + mean; }
  double invert_var(double var) const { return var * stdev * stdev; }
};

inline TargetScaler fit_scaler(std::span<const double> train_targets) {
  if (train_targets.empty())
    throw Error(errc::DegenerateTargets, "no training targets to fit on");
  double mean = 0.0;
  for (double y : train_targets) mean += y;
  mean /= double(train_targets.size());
  double var = 0.0;
  for (double y : train_targets) var += (y - mean) * (y - mean);
  var /= double(train_targets.size());
  const double stdev = std::sqrt(var);
  if (!(stdev > 0.0) || !std::isfinite(stdev))
    throw Error(errc::DegenerateTargets,
                "training targets are all identical; cannot standardize");
  return TargetScaler{mean, stdev};
}

// ---------------------------------------------------------------------------
// Split file I/O
// {"seed":u64,"ratios":[5,2,3],"train":[...],"val":[...],"test":[...]}

struct SplitFile {
  SplitSpec spec;
  SplitIndices indices;
};

inline void write_split_json(const std::string& path, const SplitSpec& spec,
                             const SplitIndices& idx) {
  nlohmann::ordered_json j;
  j["seed"] = spec.seed;
  j["ratios"] = {spec.ratios[0], spec.ratios[1], spec.ratios[2]};
  j["train"] = idx.train;
  j["val"] = idx.val;
  j["test"] = idx.test;
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw Error(errc::IoError, "cannot open split file '" + path +
                                   "' for writing");
  out << j.dump() << '\n';
  if (!out)
    throw Error(errc::IoError, "write failure on split file '" + path + "'");
}

inline SplitFile read_split_json(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw Error(errc::IoError, "cannot open split file '" + path + "'");
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded() || !j.is_object())
    throw Error(errc::MalformedJson, "split file '" + path +
                                         "' is not valid JSON");
  SplitFile f;
  try {
    f.spec.seed = j.at("seed").get<std::uint64_t>();
    auto ratios = j.at("ratios");
    if (!ratios.is_array() || ratios.size() != 3)
      throw Error(errc::MalformedJson,
                  "split file '" + path + "': 'ratios' must have 3 entries");
    for (int k = 0; k < 3; ++k)
      f.spec.ratios[std::size_t(k)] = ratios.at(std::size_t(k)).get<std::int64_t>();
    f.indices.train = j.at("train").get<std::vector<std::size_t>>();
    f.indices.val = j.at("val").get<std::vector<std::size_t>>();
    f.indices.test = j.at("test").get<std::vector<std::size_t>>();
  } catch (const nlohmann::json::exception& err) {
    throw Error(errc::MalformedJson,
                "split file '" + path + "': " + err.what());
  }
  return f;
}

}  // namespace gnnuq
