#include <algorithm>
#include <set>
#include <sstream>

#include "aggify/frontend.hpp"
#include "aggify/graphs.hpp"

namespace aggify {

std::string_view to_string(EdgeLabel label) {
    switch (label) {
    case EdgeLabel::Fall: return "fall";
    case EdgeLabel::True: return "true";
    case EdgeLabel::False: return "false";
    case EdgeLabel::LoopBack: return "loop-back";
    }
    return "?";
}

std::string_view to_string(DefOrigin origin) {
    switch (origin) {
    case DefOrigin::ParamDefault: return "param-default";
    case DefOrigin::LocalInit: return "local-init";
    case DefOrigin::Assignment: return "assignment";
    case DefOrigin::Fetch: return "fetch";
    case DefOrigin::Synthetic: return "synthetic-entry";
    }
    return "?";
}

std::string_view to_string(DepKind kind) {
    switch (kind) {
    case DepKind::Flow: return "flow";
    case DepKind::Anti: return "anti";
    case DepKind::Output: return "output";
    }
    return "?";
}

std::optional<int> Cfg::node_of(const Stmt* s) const {
    for (const auto& n : nodes)
        if (n.stmt == s) return n.id;
    return std::nullopt;
}

std::optional<EdgeLabel> Cfg::edge_label(int from, int to) const {
    for (const auto& e : edges)
        if (e.from == from && e.to == to) return e.label;
    return std::nullopt;
}

std::vector<std::string> Cfg::variables() const {
    std::set<std::string> vars;
    for (const auto& n : nodes) {
        for (const auto& d : n.defs) vars.insert(d.var);
        for (const auto& u : n.uses) vars.insert(u);
    }
    return {vars.begin(), vars.end()};
}

Cfg make_cfg(std::vector<CfgNode> nodes, std::vector<CfgEdge> edges, int entry, int exit) {
    Cfg cfg;
    cfg.nodes = std::move(nodes);
    cfg.edges = std::move(edges);
    cfg.entry = entry;
    cfg.exit = exit;
    cfg.succ.assign(cfg.nodes.size(), {});
    cfg.pred.assign(cfg.nodes.size(), {});
    for (const auto& e : cfg.edges) {
        auto& s = cfg.succ[static_cast<std::size_t>(e.from)];
        if (std::find(s.begin(), s.end(), e.to) == s.end()) s.push_back(e.to);
        auto& p = cfg.pred[static_cast<std::size_t>(e.to)];
        if (std::find(p.begin(), p.end(), e.from) == p.end()) p.push_back(e.from);
    }
    return cfg;
}

namespace {

void add_use(std::vector<std::string>& uses, const std::string& v) {
    if (std::find(uses.begin(), uses.end(), v) == uses.end()) uses.push_back(v);
}

std::string first_line(std::string s, std::size_t limit = 60) {
    if (auto nl = s.find('\n'); nl != std::string::npos) s.resize(nl);
    if (s.size() > limit) s = s.substr(0, limit - 3) + "...";
    return s;
}

std::string stmt_label(const Stmt& s) {
    if (const auto* i = s.as<IfStmt>()) return "IF " + print_expr(i->cond);
    if (const auto* w = s.as<WhileStmt>()) return "WHILE " + (w->cond ? print_expr(*w->cond) : "@@FETCH_STATUS = 0");
    std::string text = print_block(Block{s});
    while (!text.empty() && (text.back() == '\n' || text.back() == ' ')) text.pop_back();
    return first_line(text);
}

/// Def/use sets of one statement node.
void fill_defs_uses(CfgNode& n, const Stmt& s) {
    auto uses_of = [&](const auto& x) {
        std::vector<std::string> vs;
        collect_vars(x, vs);
        for (const auto& v : vs) add_use(n.uses, v);
    };
    std::visit(
        [&](const auto& st) {
            using T = std::decay_t<decltype(st)>;
            if constexpr (std::is_same_v<T, DeclareStmt>) {
                if (st.init) uses_of(*st.init);
                n.defs.push_back(VarDef{st.var, DefOrigin::LocalInit, true, !st.init && !st.type.is_table()});
            } else if constexpr (std::is_same_v<T, AssignStmt>) {
                uses_of(st.value);
                n.defs.push_back(VarDef{st.var, DefOrigin::Assignment, true, false});
            } else if constexpr (std::is_same_v<T, AssignQueryStmt>) {
                uses_of(st.query);
                // An empty result keeps the old values, so the targets are
                // read as well as (possibly) written.
                for (const auto& v : st.vars) {
                    add_use(n.uses, v);
                    n.defs.push_back(VarDef{v, DefOrigin::Assignment, false, false});
                }
            } else if constexpr (std::is_same_v<T, IfStmt>) {
                uses_of(st.cond);
            } else if constexpr (std::is_same_v<T, WhileStmt>) {
                if (st.cond) uses_of(*st.cond);
            } else if constexpr (std::is_same_v<T, CursorDeclareStmt>) {
                uses_of(st.query);
            } else if constexpr (std::is_same_v<T, FetchStmt>) {
                for (const auto& v : st.vars) n.defs.push_back(VarDef{v, DefOrigin::Fetch, true, false});
            } else if constexpr (std::is_same_v<T, InsertLocalStmt>) {
                for (const auto& v : st.values) uses_of(v);
                add_use(n.uses, st.table);
                n.defs.push_back(VarDef{st.table, DefOrigin::Assignment, true, false});
            } else if constexpr (std::is_same_v<T, ReturnStmt>) {
                if (st.value) uses_of(*st.value);
            } else if constexpr (std::is_same_v<T, DmlStmt>) {
                for (const auto& a : st.assignments) uses_of(a.value);
                for (const auto& v : st.values) uses_of(v);
                if (st.where) uses_of(*st.where);
            }
        },
        s.node);
}

struct Pending {
    int node;
    EdgeLabel label;
};

class CfgBuilder {
public:
    Cfg build(const Program& p) {
        CfgNode& entry = new_node(NodeKind::Entry, nullptr, {}, -1);
        entry.label = "ENTRY";
        for (const auto& prm : p.params)
            entry.defs.push_back(VarDef{prm.name, DefOrigin::ParamDefault, true, false});
        std::vector<Pending> out = block(p.body, {}, {{0, EdgeLabel::Fall}});
        int exit_id = static_cast<int>(nodes_.size());
        CfgNode& exit = new_node(NodeKind::Exit, nullptr, {}, -1);
        exit.label = "EXIT";
        exit.subtree_end = exit_id + 1;
        walk_stmts(p.body, [&](const Stmt& s) {
            if (const auto* d = s.as<DeclareStmt>(); d && d->type.is_table()) add_use(exit.uses, d->var);
        });
        connect(out, exit_id, false);
        for (int r : returns_) edges_.push_back(CfgEdge{r, exit_id, EdgeLabel::Fall});
        nodes_[0].subtree_end = exit_id + 1;
        return make_cfg(std::move(nodes_), std::move(edges_), 0, exit_id);
    }

private:
    CfgNode& new_node(NodeKind kind, const Stmt* s, const BlockPath& path, int index) {
        CfgNode n;
        n.id = static_cast<int>(nodes_.size());
        n.kind = kind;
        n.stmt = s;
        n.block = path;
        n.index = index;
        n.subtree_end = n.id + 1;
        if (s) n.span = s->span;
        nodes_.push_back(std::move(n));
        return nodes_.back();
    }

    void connect(const std::vector<Pending>& from, int to, bool back) {
        for (const auto& p : from) edges_.push_back(CfgEdge{p.node, to, back ? EdgeLabel::LoopBack : p.label});
    }

    std::vector<Pending> block(const Block& b, const BlockPath& path, std::vector<Pending> in) {
        for (std::size_t i = 0; i < b.size(); ++i) in = stmt(b[i], path, static_cast<int>(i), std::move(in));
        return in;
    }

    static BlockPath child(BlockPath path, int index, int slot) {
        path.emplace_back(index, slot);
        return path;
    }

    std::vector<Pending> stmt(const Stmt& s, const BlockPath& path, int index, std::vector<Pending> in) {
        if (const auto* f = s.as<ForStmt>()) {
            int init = new_node(NodeKind::ForInit, &s, path, index).id;
            nodes_[static_cast<std::size_t>(init)].label = "FOR " + f->init.var + " = " + print_expr(f->init.value);
            uses_into(init, f->init.value);
            nodes_[static_cast<std::size_t>(init)].defs.push_back(VarDef{f->init.var, DefOrigin::Assignment, true});
            connect(in, init, false);
            int cond = new_node(NodeKind::ForCond, &s, path, index).id;
            nodes_[static_cast<std::size_t>(cond)].label = "FOR " + print_expr(f->cond);
            uses_into(cond, f->cond);
            edges_.push_back(CfgEdge{init, cond, EdgeLabel::Fall});
            auto body_out = block(f->body, child(path, index, 0), {{cond, EdgeLabel::True}});
            int incr = new_node(NodeKind::ForIncr, &s, path, index).id;
            nodes_[static_cast<std::size_t>(incr)].label = "FOR " + f->incr.var + " = " + print_expr(f->incr.value);
            uses_into(incr, f->incr.value);
            nodes_[static_cast<std::size_t>(incr)].defs.push_back(VarDef{f->incr.var, DefOrigin::Assignment, true});
            connect(body_out, incr, false);
            edges_.push_back(CfgEdge{incr, cond, EdgeLabel::LoopBack});
            int end = static_cast<int>(nodes_.size());
            nodes_[static_cast<std::size_t>(init)].subtree_end = end;
            nodes_[static_cast<std::size_t>(cond)].subtree_end = end;
            return {{cond, EdgeLabel::False}};
        }

        int id = new_node(NodeKind::Statement, &s, path, index).id;
        {
            CfgNode& n = nodes_[static_cast<std::size_t>(id)];
            n.label = stmt_label(s);
            fill_defs_uses(n, s);
        }
        connect(in, id, false);
        std::vector<Pending> out;
        if (const auto* i = s.as<IfStmt>()) {
            auto t = block(i->then_block, child(path, index, 0), {{id, EdgeLabel::True}});
            auto e = block(i->else_block, child(path, index, 1), {{id, EdgeLabel::False}});
            out = std::move(t);
            out.insert(out.end(), e.begin(), e.end());
        } else if (const auto* w = s.as<WhileStmt>()) {
            auto body_out = block(w->body, child(path, index, 0), {{id, EdgeLabel::True}});
            connect(body_out, id, true);
            out = {{id, EdgeLabel::False}};
        } else if (s.as<ReturnStmt>()) {
            returns_.push_back(id);
        } else {
            out = {{id, EdgeLabel::Fall}};
        }
        nodes_[static_cast<std::size_t>(id)].subtree_end = static_cast<int>(nodes_.size());
        return out;
    }

    void uses_into(int id, const Expr& e) {
        std::vector<std::string> vs;
        collect_vars(e, vs);
        for (const auto& v : vs) add_use(nodes_[static_cast<std::size_t>(id)].uses, v);
    }

    std::vector<CfgNode> nodes_;
    std::vector<CfgEdge> edges_;
    std::vector<int> returns_;
};

std::string dot_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        if (c == '"' || c == '\\') out += '\\';
        out += c;
    }
    return out;
}

} // namespace

Cfg build_cfg(const Program& p) { return CfgBuilder().build(p); }

std::string to_dot(const Cfg& cfg, const std::vector<DepEdge>& deps) {
    std::ostringstream out;
    out << "digraph cfg {\n  node [shape=box, fontname=\"monospace\"];\n";
    for (const auto& n : cfg.nodes) out << "  n" << n.id << " [label=\"" << n.id << ": " << dot_escape(n.label) << "\"];\n";
    for (const auto& e : cfg.edges) {
        out << "  n" << e.from << " -> n" << e.to;
        if (e.label != EdgeLabel::Fall) out << " [label=\"" << to_string(e.label) << "\"]";
        out << ";\n";
    }
    for (const auto& d : deps) {
        out << "  n" << d.src << " -> n" << d.dst << " [style=" << (d.kind == DepKind::Flow ? "dashed" : "dotted")
            << ", color=" << (d.kind == DepKind::Flow ? "blue" : d.kind == DepKind::Anti ? "red" : "gray")
            << ", label=\"" << to_string(d.kind) << " " << dot_escape(d.variable) << "\"];\n";
    }
    out << "}\n";
    return out.str();
}

} // namespace aggify
