#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "aggify/graphs.hpp"

namespace aggify {

struct DefSite {
    int id = 0;  // index into DataflowFacts::defs
    int node = 0;
    std::string var;
    DefOrigin origin = DefOrigin::Assignment;
    bool kills = true;
    bool null_init = false;
};

struct UseSite {
    int node = 0;
    std::string var;
    friend bool operator==(const UseSite&, const UseSite&) = default;
    friend auto operator<=>(const UseSite&, const UseSite&) = default;
};

struct DataflowOptions {
    /// Give every variable without a definition at entry a synthetic one
    /// there, so each reachable use has at least one reaching definition.
    bool synthetic_entry_defs = true;
};

struct DataflowFacts {
    std::vector<DefSite> defs;
    std::vector<std::vector<int>> reach_in;  // sorted def ids per node
    std::vector<std::vector<int>> reach_out;
    std::vector<std::set<std::string>> live_in;
    std::vector<std::set<std::string>> live_out;
    std::map<UseSite, std::vector<int>> ud;
    std::map<int, std::vector<UseSite>> du;
    std::vector<std::string> warnings;
    int reach_passes = 0;
    int live_passes = 0;

    const DefSite& def(int id) const { return defs[static_cast<std::size_t>(id)]; }
    /// Reaching definitions of `var` at the start of `node`.
    std::vector<int> reaching(int node, const std::string& var) const;
    bool live_at_entry(int node, const std::string& var) const;
};

/// Forward may-analysis, iterated in reverse post-order to a fixpoint.
/// Nodes unreachable from entry keep empty sets.
DataflowFacts reaching_definitions(const Cfg& cfg, DataflowOptions options = {});
/// Backward analysis, iterated in post-order; fills live_in/live_out.
void live_variables(const Cfg& cfg, DataflowFacts& facts);
/// ud[u] = reaching defs of u's variable at u's node; du is its inverse.
void build_ud_du_chains(const Cfg& cfg, DataflowFacts& facts);

/// All three analyses.
DataflowFacts analyze(const Cfg& cfg, DataflowOptions options = {});

/// JSON object keyed by node id.
std::string facts_to_json(const Cfg& cfg, const DataflowFacts& facts);

} // namespace aggify
