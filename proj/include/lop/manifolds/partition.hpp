#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "lop/core/common.hpp"

namespace lop {

using Block = std::vector<int>;

/// Disjoint nonempty blocks of unit ids covering 0..n-1 of one interface.
/// Block b collects the clones of base unit b.
struct Partition {
  std::vector<Block> blocks;

  int num_units() const {
    int n = 0;
    for (const auto& b : blocks) n += static_cast<int>(b.size());
    return n;
  }

  bool trivial() const {
    return std::all_of(blocks.begin(), blocks.end(), [](const Block& b) { return b.size() == 1; });
  }

  /// Throws unless the blocks are disjoint, nonempty and cover exactly 0..n-1.
  void validate(int n, const std::string& where = "partition") const {
    std::vector<char> seen(static_cast<std::size_t>(std::max(n, 0)), 0);
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      if (blocks[b].empty()) throw ValidationError("block " + std::to_string(b) + " is empty", where);
      for (int u : blocks[b]) {
        if (u < 0 || u >= n) throw ValidationError("unit " + std::to_string(u) + " outside 0.." + std::to_string(n - 1), where);
        if (seen[static_cast<std::size_t>(u)]) throw ValidationError("unit " + std::to_string(u) + " in two blocks", where);
        seen[static_cast<std::size_t>(u)] = 1;
      }
    }
    if (num_units() != n) throw ValidationError("blocks cover " + std::to_string(num_units()) + " of " + std::to_string(n) + " units", where);
  }

  /// Block index of every unit.
  std::vector<int> block_of() const {
    std::vector<int> owner(static_cast<std::size_t>(num_units()), -1);
    for (std::size_t b = 0; b < blocks.size(); ++b)
      for (int u : blocks[b]) owner[static_cast<std::size_t>(u)] = static_cast<int>(b);
    return owner;
  }

  static Partition singletons(int n) {
    Partition p;
    for (int u = 0; u < n; ++u) p.blocks.push_back({u});
    return p;
  }

  /// Clones of base unit b are the units (b * factor + j) * stride + offset
  /// for every offset < stride: with stride = spatial size this is the
  /// channel-major layout of cloned channels.
  static Partition cloned(int base_channels, int factor, int spatial = 1) {
    Partition p;
    for (int c = 0; c < base_channels; ++c)
      for (int s = 0; s < spatial; ++s) {
        Block b;
        for (int j = 0; j < factor; ++j) b.push_back((c * factor + j) * spatial + s);
        p.blocks.push_back(std::move(b));
      }
    return p;
  }

  bool operator==(const Partition&) const = default;
};

}  // namespace lop
