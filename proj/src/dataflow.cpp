#include "aggify/dataflow.hpp"

#include <algorithm>
#include <functional>

#include <json.hpp>

namespace aggify {

namespace {

/// Fixed-width bit vector over definition ids.
class Bits {
public:
    explicit Bits(std::size_t n = 0) : w_((n + 63) / 64, 0) {}
    void set(std::size_t i) { w_[i / 64] |= std::uint64_t{1} << (i % 64); }
    bool test(std::size_t i) const { return (w_[i / 64] >> (i % 64)) & 1; }
    void unite(const Bits& o) {
        for (std::size_t i = 0; i < w_.size(); ++i) w_[i] |= o.w_[i];
    }
    void subtract(const Bits& o) {
        for (std::size_t i = 0; i < w_.size(); ++i) w_[i] &= ~o.w_[i];
    }
    friend bool operator==(const Bits&, const Bits&) = default;
    std::vector<int> members(std::size_t n) const {
        std::vector<int> out;
        for (std::size_t i = 0; i < n; ++i)
            if (test(i)) out.push_back(static_cast<int>(i));
        return out;
    }

private:
    std::vector<std::uint64_t> w_;
};

std::vector<int> post_order(const Cfg& cfg, std::vector<bool>& reachable) {
    std::vector<int> order;
    reachable.assign(cfg.size(), false);
    // Iterative DFS keeps deep CFGs off the call stack.
    std::vector<std::pair<int, std::size_t>> stack{{cfg.entry, 0}};
    reachable[static_cast<std::size_t>(cfg.entry)] = true;
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        const auto& succ = cfg.succ[static_cast<std::size_t>(n)];
        if (next < succ.size()) {
            int s = succ[next++];
            if (!reachable[static_cast<std::size_t>(s)]) {
                reachable[static_cast<std::size_t>(s)] = true;
                stack.emplace_back(s, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    return order;
}

} // namespace

std::vector<int> DataflowFacts::reaching(int node, const std::string& var) const {
    std::vector<int> out;
    for (int d : reach_in[static_cast<std::size_t>(node)])
        if (defs[static_cast<std::size_t>(d)].var == var) out.push_back(d);
    return out;
}

bool DataflowFacts::live_at_entry(int node, const std::string& var) const {
    return live_in[static_cast<std::size_t>(node)].count(var) > 0;
}

DataflowFacts reaching_definitions(const Cfg& cfg, DataflowOptions options) {
    DataflowFacts f;
    const std::size_t n = cfg.size();
    for (const auto& node : cfg.nodes) {
        for (const auto& d : node.defs) {
            f.defs.push_back(DefSite{static_cast<int>(f.defs.size()), node.id, d.var, d.origin, d.kills, d.null_init});
        }
    }
    if (options.synthetic_entry_defs) {
        const auto& entry = cfg.node(cfg.entry);
        for (const auto& v : cfg.variables()) {
            bool defined = std::any_of(entry.defs.begin(), entry.defs.end(), [&](const VarDef& d) { return d.var == v; });
            if (!defined) f.defs.push_back(DefSite{static_cast<int>(f.defs.size()), cfg.entry, v, DefOrigin::Synthetic});
        }
    }
    const std::size_t nd = f.defs.size();

    std::map<std::string, Bits> defs_of_var;
    for (const auto& d : f.defs) {
        auto [it, _] = defs_of_var.try_emplace(d.var, Bits(nd));
        it->second.set(static_cast<std::size_t>(d.id));
    }
    std::vector<Bits> gen(n, Bits(nd)), kill(n, Bits(nd));
    for (const auto& d : f.defs) {
        gen[static_cast<std::size_t>(d.node)].set(static_cast<std::size_t>(d.id));
        if (d.kills) kill[static_cast<std::size_t>(d.node)].unite(defs_of_var[d.var]);
    }
    for (std::size_t i = 0; i < n; ++i) kill[i].subtract(gen[i]);

    std::vector<bool> reachable;
    std::vector<int> rpo = post_order(cfg, reachable);
    std::reverse(rpo.begin(), rpo.end());

    std::vector<Bits> in(n, Bits(nd)), out(n, Bits(nd));
    bool changed = true;
    while (changed) {
        changed = false;
        ++f.reach_passes;
        for (int id : rpo) {
            auto i = static_cast<std::size_t>(id);
            Bits acc(nd);
            for (int p : cfg.pred[i])
                if (reachable[static_cast<std::size_t>(p)]) acc.unite(out[static_cast<std::size_t>(p)]);
            Bits o = acc;
            o.subtract(kill[i]);
            o.unite(gen[i]);
            if (!(acc == in[i]) || !(o == out[i])) {
                in[i] = std::move(acc);
                out[i] = std::move(o);
                changed = true;
            }
        }
    }
    f.reach_in.resize(n);
    f.reach_out.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        f.reach_in[i] = in[i].members(nd);
        f.reach_out[i] = out[i].members(nd);
    }
    return f;
}

void live_variables(const Cfg& cfg, DataflowFacts& f) {
    const std::size_t n = cfg.size();
    std::vector<bool> reachable;
    std::vector<int> order = post_order(cfg, reachable);
    for (std::size_t i = 0; i < n; ++i)
        if (!reachable[i]) order.push_back(static_cast<int>(i));

    std::vector<std::set<std::string>> kills(n);
    for (const auto& node : cfg.nodes)
        for (const auto& d : node.defs)
            if (d.kills) kills[static_cast<std::size_t>(node.id)].insert(d.var);

    f.live_in.assign(n, {});
    f.live_out.assign(n, {});
    f.live_passes = 0;
    bool changed = true;
    while (changed) {
        changed = false;
        ++f.live_passes;
        for (int id : order) {
            auto i = static_cast<std::size_t>(id);
            std::set<std::string> out;
            for (int s : cfg.succ[i]) {
                const auto& li = f.live_in[static_cast<std::size_t>(s)];
                out.insert(li.begin(), li.end());
            }
            std::set<std::string> in;
            for (const auto& v : out)
                if (!kills[i].count(v)) in.insert(v);
            in.insert(cfg.nodes[i].uses.begin(), cfg.nodes[i].uses.end());
            if (in != f.live_in[i] || out != f.live_out[i]) {
                f.live_in[i] = std::move(in);
                f.live_out[i] = std::move(out);
                changed = true;
            }
        }
    }
}

void build_ud_du_chains(const Cfg& cfg, DataflowFacts& f) {
    f.ud.clear();
    f.du.clear();
    f.warnings.clear();
    for (const auto& node : cfg.nodes) {
        for (const auto& v : node.uses) {
            UseSite u{node.id, v};
            auto defs = f.reaching(node.id, v);
            for (int d : defs) {
                f.du[d].push_back(u);
                if (f.def(d).origin == DefOrigin::Synthetic)
                    f.warnings.push_back("possibly uninitialized use of " + v + " at node " + std::to_string(node.id) +
                                         (node.span.valid() ? " (" + to_string(node.span) + ")" : ""));
            }
            f.ud[u] = std::move(defs);
        }
    }
    for (auto& [d, uses] : f.du) std::sort(uses.begin(), uses.end());
}

DataflowFacts analyze(const Cfg& cfg, DataflowOptions options) {
    DataflowFacts f = reaching_definitions(cfg, options);
    live_variables(cfg, f);
    build_ud_du_chains(cfg, f);
    return f;
}

std::vector<DepEdge> build_ddg(const Cfg& cfg) {
    DataflowFacts f = analyze(cfg);
    std::vector<DepEdge> out;
    const std::size_t n = cfg.size();

    for (const auto& [use, defs] : f.ud)
        for (int d : defs) out.push_back(DepEdge{f.def(d).node, use.node, DepKind::Flow, use.var});

    for (const auto& node : cfg.nodes) {
        for (const auto& vd : node.defs) {
            for (int d : f.reaching(node.id, vd.var)) {
                if (f.def(d).origin == DefOrigin::Synthetic) continue;
                out.push_back(DepEdge{f.def(d).node, node.id, DepKind::Output, vd.var});
            }
        }
    }

    // Reaching uses: a read at `a` reaches `b` when some path a -> b has no
    // killing write of the variable after `a`.
    std::vector<bool> reachable;
    std::vector<int> rpo = post_order(cfg, reachable);
    std::reverse(rpo.begin(), rpo.end());
    std::vector<UseSite> all_uses;
    for (const auto& node : cfg.nodes)
        if (reachable[static_cast<std::size_t>(node.id)])
            for (const auto& v : node.uses) all_uses.push_back(UseSite{node.id, v});
    const std::size_t nu = all_uses.size();
    std::vector<Bits> gen(n, Bits(nu)), kill(n, Bits(nu));
    for (std::size_t k = 0; k < nu; ++k) gen[static_cast<std::size_t>(all_uses[k].node)].set(k);
    for (const auto& node : cfg.nodes)
        for (const auto& vd : node.defs)
            if (vd.kills)
                for (std::size_t k = 0; k < nu; ++k)
                    if (all_uses[k].var == vd.var) kill[static_cast<std::size_t>(node.id)].set(k);
    std::vector<Bits> in(n, Bits(nu)), out_bits(n, Bits(nu));
    bool changed = true;
    while (changed) {
        changed = false;
        for (int id : rpo) {
            auto i = static_cast<std::size_t>(id);
            Bits acc(nu);
            for (int p : cfg.pred[i])
                if (reachable[static_cast<std::size_t>(p)]) acc.unite(out_bits[static_cast<std::size_t>(p)]);
            Bits o = acc;
            o.unite(gen[i]);
            o.subtract(kill[i]);
            if (!(acc == in[i]) || !(o == out_bits[i])) {
                in[i] = std::move(acc);
                out_bits[i] = std::move(o);
                changed = true;
            }
        }
    }
    for (const auto& node : cfg.nodes) {
        auto i = static_cast<std::size_t>(node.id);
        for (const auto& vd : node.defs)
            for (int k : in[i].members(nu))
                if (all_uses[static_cast<std::size_t>(k)].var == vd.var)
                    out.push_back(DepEdge{all_uses[static_cast<std::size_t>(k)].node, node.id, DepKind::Anti, vd.var});
    }

    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

std::string facts_to_json(const Cfg& cfg, const DataflowFacts& f) {
    using nlohmann::ordered_json;
    auto def_label = [&](int d) {
        const auto& s = f.def(d);
        return s.var + "@" + std::to_string(s.node) + ":" + std::string(to_string(s.origin));
    };
    ordered_json nodes = ordered_json::object();
    for (const auto& node : cfg.nodes) {
        auto i = static_cast<std::size_t>(node.id);
        ordered_json j;
        j["label"] = node.label;
        j["defs"] = ordered_json::array();
        for (const auto& d : node.defs) j["defs"].push_back(d.var);
        j["uses"] = node.uses;
        j["reach_in"] = ordered_json::array();
        for (int d : f.reach_in[i]) j["reach_in"].push_back(def_label(d));
        j["live_in"] = f.live_in[i];
        j["live_out"] = f.live_out[i];
        ordered_json ud = ordered_json::object();
        for (const auto& v : node.uses) {
            ordered_json ds = ordered_json::array();
            auto it = f.ud.find(UseSite{node.id, v});
            if (it != f.ud.end())
                for (int d : it->second) ds.push_back(def_label(d));
            ud[v] = ds;
        }
        j["ud"] = ud;
        nodes[std::to_string(node.id)] = j;
    }
    ordered_json root;
    root["nodes"] = nodes;
    root["reach_passes"] = f.reach_passes;
    root["live_passes"] = f.live_passes;
    root["warnings"] = f.warnings;
    return root.dump(2);
}

} // namespace aggify
