#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "aggify/dataflow.hpp"
#include "aggify/frontend.hpp"
#include "aggify/graphs.hpp"

namespace testsupport {

inline std::filesystem::path fixtures() { return AGGIFY_FIXTURES_DIR; }

inline std::string read_file(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

inline aggify::Program parse_fixture(const std::string& name) {
    return aggify::parse_source(read_file(fixtures() / name), aggify::ParseOptions{true});
}

/// Random CFG: node 0 is entry, the last node exit. Every other node has one
/// or two successors anywhere in the graph, so loops and unreachable nodes
/// both occur. A node defines each variable at most once.
inline aggify::Cfg random_cfg(std::mt19937_64& rng, int max_nodes = 10, int max_vars = 4) {
    auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
    auto coin = [&](double p) { return std::bernoulli_distribution(p)(rng); };
    int n = pick(2, max_nodes);
    int nv = pick(1, max_vars);
    std::vector<std::string> vars;
    for (int i = 0; i < nv; ++i) vars.push_back("@v" + std::to_string(i));

    std::vector<aggify::CfgNode> nodes(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        auto& node = nodes[static_cast<std::size_t>(i)];
        node.id = i;
        node.kind = i == 0 ? aggify::NodeKind::Entry : i == n - 1 ? aggify::NodeKind::Exit : aggify::NodeKind::Statement;
        for (const auto& v : vars) {
            if (i != n - 1 && coin(i == 0 ? 0.5 : 0.3)) {
                aggify::VarDef d;
                d.var = v;
                d.kills = coin(0.8);
                node.defs.push_back(d);
            }
            if (i != 0 && coin(0.3)) node.uses.push_back(v);
        }
    }
    std::vector<aggify::CfgEdge> edges;
    std::set<std::pair<int, int>> seen;
    for (int i = 0; i < n - 1; ++i) {
        int k = pick(1, 2);
        for (int j = 0; j < k; ++j) {
            int to = pick(1, n - 1);
            if (seen.insert({i, to}).second) edges.push_back({i, to, aggify::EdgeLabel::Fall});
        }
    }
    return aggify::make_cfg(std::move(nodes), std::move(edges), 0, n - 1);
}

/// Reaching definitions by enumerating simple paths. A definition reaches
/// the entry of a node when a path from its node arrives there without
/// passing an intermediate node that kills the variable. Only definitions
/// in nodes reachable from entry count, and unreachable nodes have none.
inline std::vector<std::set<int>> brute_reaching(const aggify::Cfg& cfg) {
    const int n = static_cast<int>(cfg.size());
    std::vector<bool> reachable(static_cast<std::size_t>(n), false);
    std::function<void(int)> mark = [&](int x) {
        if (reachable[static_cast<std::size_t>(x)]) return;
        reachable[static_cast<std::size_t>(x)] = true;
        for (int s : cfg.succ[static_cast<std::size_t>(x)]) mark(s);
    };
    mark(cfg.entry);

    std::vector<std::set<int>> in(static_cast<std::size_t>(n));
    int id = 0;
    for (const auto& node : cfg.nodes) {
        for (const auto& d : node.defs) {
            int def_id = id++;
            if (!reachable[static_cast<std::size_t>(node.id)]) continue;
            std::vector<bool> on_path(static_cast<std::size_t>(n), false);
            std::function<void(int)> walk = [&](int x) {
                for (int s : cfg.succ[static_cast<std::size_t>(x)]) {
                    in[static_cast<std::size_t>(s)].insert(def_id);
                    if (on_path[static_cast<std::size_t>(s)] || s == node.id) continue;
                    bool kills = false;
                    for (const auto& e : cfg.node(s).defs) kills = kills || (e.var == d.var && e.kills);
                    if (kills) continue;
                    on_path[static_cast<std::size_t>(s)] = true;
                    walk(s);
                    on_path[static_cast<std::size_t>(s)] = false;
                }
            };
            walk(node.id);
        }
    }
    return in;
}

/// Liveness by enumerating simple paths: a variable is live at a node when
/// some path from it reaches a use before any killing definition.
inline std::vector<std::set<std::string>> brute_live(const aggify::Cfg& cfg) {
    const int n = static_cast<int>(cfg.size());
    std::vector<std::set<std::string>> live(static_cast<std::size_t>(n));
    for (int start = 0; start < n; ++start) {
        for (const auto& v : cfg.variables()) {
            std::vector<bool> on_path(static_cast<std::size_t>(n), false);
            std::function<bool(int)> search = [&](int x) {
                const auto& node = cfg.node(x);
                for (const auto& u : node.uses)
                    if (u == v) return true;
                for (const auto& d : node.defs)
                    if (d.var == v && d.kills) return false;
                on_path[static_cast<std::size_t>(x)] = true;
                bool found = false;
                for (int s : cfg.succ[static_cast<std::size_t>(x)])
                    if (!found && !on_path[static_cast<std::size_t>(s)]) found = search(s);
                on_path[static_cast<std::size_t>(x)] = false;
                return found;
            };
            if (search(start)) live[static_cast<std::size_t>(start)].insert(v);
        }
    }
    return live;
}

/// Compares the analyses against the oracles; returns a mismatch description
/// or an empty string.
inline std::string check_against_oracle(const aggify::Cfg& cfg) {
    aggify::DataflowFacts f = aggify::analyze(cfg, aggify::DataflowOptions{false});
    auto reach = brute_reaching(cfg);
    auto live = brute_live(cfg);
    for (std::size_t i = 0; i < cfg.size(); ++i) {
        std::set<int> got(f.reach_in[i].begin(), f.reach_in[i].end());
        if (got != reach[i]) return "reaching definitions differ at node " + std::to_string(i);
        if (f.live_in[i] != live[i]) return "liveness differs at node " + std::to_string(i);
    }
    return {};
}

} // namespace testsupport
