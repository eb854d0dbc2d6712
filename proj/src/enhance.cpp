#include "aggify/enhance.hpp"

#include <algorithm>
#include <cctype>
#include <functional>

namespace aggify {

namespace {

std::string lower(std::string s) {
    for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

[[noreturn]] void not_convertible(const std::string& msg, Span span) {
    throw Error(ErrorKind::NotConvertible, msg, span);
}

/// Expression slots of a statement outside of queries.
void expr_slots(Stmt& s, const std::function<void(Expr&)>& fn) {
    std::visit(
        [&](auto& n) {
            using T = std::decay_t<decltype(n)>;
            if constexpr (std::is_same_v<T, DeclareStmt>) {
                if (n.init) fn(*n.init);
            } else if constexpr (std::is_same_v<T, AssignStmt>) {
                fn(n.value);
            } else if constexpr (std::is_same_v<T, IfStmt>) {
                fn(n.cond);
            } else if constexpr (std::is_same_v<T, WhileStmt>) {
                if (n.cond) fn(*n.cond);
            } else if constexpr (std::is_same_v<T, ForStmt>) {
                fn(n.init.value);
                fn(n.cond);
                fn(n.incr.value);
            } else if constexpr (std::is_same_v<T, InsertLocalStmt>) {
                for (auto& v : n.values) fn(v);
            } else if constexpr (std::is_same_v<T, ReturnStmt>) {
                if (n.value) fn(*n.value);
            }
        },
        s.node);
}

void walk_mut(Block& b, const std::function<void(Stmt&)>& fn) {
    for (auto& s : b) {
        fn(s);
        for (Block* child : child_blocks(s)) walk_mut(*child, fn);
    }
}

bool compound(const Expr& e) { return e.as<UnaryExpr>() || e.as<BinaryExpr>() || e.as<FuncExpr>(); }

void for_each_child(Expr& e, const std::function<void(Expr&)>& fn) {
    if (auto* u = e.as<UnaryExpr>()) fn(*u->operand);
    else if (auto* b = e.as<BinaryExpr>()) {
        fn(*b->lhs);
        fn(*b->rhs);
    } else if (auto* f = e.as<FuncExpr>()) {
        for (auto& a : f->args) fn(a);
    }
}

struct LoopView {
    Block* block = nullptr;
    CursorDeclareStmt* declare = nullptr;
    FetchStmt* priming = nullptr;
    WhileStmt* loop = nullptr;
};

LoopView view(Program& p, const CursorLoopRegion& r) {
    LoopView v;
    v.block = &block_at(p.body, r.block);
    auto at = [&](int i) -> Stmt& { return (*v.block)[static_cast<std::size_t>(i)]; };
    v.declare = at(r.declare_index).as<CursorDeclareStmt>();
    v.priming = at(r.priming_fetch_index).as<FetchStmt>();
    v.loop = at(r.while_index).as<WhileStmt>();
    return v;
}

/// Walks the maximal qualifying subexpressions of the loop body (advancing
/// FETCH excluded) in pre-order.
void find_candidates(Program& p, const CursorLoopRegion& r,
                     const std::function<void(Expr&, const std::set<std::string>&, ScalarType)>& found) {
    LoopView v = view(p, r);
    for (const auto& item : v.declare->query.projections)
        if (item.star) return;

    Block delta(v.loop->body.begin(), v.loop->body.end() - 1);
    std::vector<std::string> w = written_vars(delta);
    std::set<std::string> blocked(w.begin(), w.end());
    // Q is evaluated at DECLARE: anything changed between there and the loop
    // would be read too early. The priming FETCH is exempt: fetched values
    // are replaced by their columns.
    Block between;
    for (int i = r.declare_index + 1; i < r.while_index; ++i)
        if (i != r.priming_fetch_index) between.push_back((*v.block)[static_cast<std::size_t>(i)]);
    for (const auto& x : written_vars(between)) blocked.insert(x);
    auto types = declared_types(p);

    std::function<void(Expr&)> visit = [&](Expr& e) {
        if (compound(e)) {
            bool pure = true;
            std::set<std::string> reads;
            visit_shallow(e, [&](const Expr& x) {
                if (x.as<SubqueryExpr>() || x.as<AggregateExpr>() || x.as<ColumnExpr>()) pure = false;
                if (const auto* b = x.as<BinaryExpr>(); b && (b->op == BinaryOp::Div || b->op == BinaryOp::Mod))
                    pure = false;
                if (const auto* var = x.as<VarExpr>()) {
                    if (var->param) pure = false;
                    reads.insert(var->name);
                }
            });
            bool clean = std::none_of(reads.begin(), reads.end(), [&](const std::string& x) { return blocked.count(x); });
            auto type = pure && clean && !reads.empty() ? infer_type(e, types) : std::nullopt;
            if (type) {
                found(e, reads, *type);
                return;
            }
        }
        for_each_child(e, visit);
    };
    // The loop body minus its advancing FETCH, mutated in place.
    Block& body = v.loop->body;
    std::function<void(Stmt&)> per_stmt = [&](Stmt& s) { expr_slots(s, visit); };
    for (std::size_t i = 0; i + 1 < body.size(); ++i) {
        per_stmt(body[i]);
        for (Block* child : child_blocks(body[i])) walk_mut(*child, per_stmt);
    }
}

} // namespace

std::vector<MotionCandidate> motion_candidates(const CursorLoopRegion& region, const Program& p) {
    std::vector<MotionCandidate> out;
    // find_candidates only mutates through the callback; none here.
    auto& mp = const_cast<Program&>(p);
    find_candidates(mp, region, [&](Expr& e, const std::set<std::string>& reads, ScalarType t) {
        out.push_back(MotionCandidate{&e, reads, {}, "", t});
    });
    return out;
}

std::vector<std::string> acyclic_code_motion(Program& p, const CursorLoopRegion& region) {
    std::vector<std::string> added;
    LoopView v = view(p, region);
    QuerySpec& q = v.declare->query;
    const auto& fetch = region.fetch_vars;

    std::set<std::string> taken;
    for (const auto& x : referenced_vars(p.body)) taken.insert(lower(x));
    for (const auto& prm : p.params) taken.insert(lower(prm.name));
    for (const auto& item : q.projections) {
        if (!item.alias.empty()) taken.insert("@" + lower(item.alias));
        if (const auto* c = item.expr.as<ColumnExpr>()) taken.insert("@" + lower(c->name));
    }
    auto fresh = [&](const std::string& base) {
        std::string name = base;
        for (int n = 2; taken.count("@" + lower(name)); ++n) name = base + std::to_string(n);
        taken.insert("@" + lower(name));
        return name;
    };

    std::vector<std::pair<std::string, ScalarType>> decls;
    std::vector<SelectItem> extra;
    find_candidates(p, region, [&](Expr& e, const std::set<std::string>&, ScalarType t) {
        std::string alias = fresh(t == ScalarType::Bool ? "boolVal" : "hoistVal");
        Expr projected = e;
        rewrite_shallow(projected, [&](Expr& x) {
            const auto* var = x.as<VarExpr>();
            if (!var) return;
            auto it = std::find(fetch.begin(), fetch.end(), var->name);
            if (it == fetch.end()) return;
            Expr replacement = q.projections[static_cast<std::size_t>(it - fetch.begin())].expr;
            x = std::move(replacement);
        });
        extra.push_back(SelectItem{std::move(projected), alias, false, ""});
        Span span = e.span;
        e = make_var("@" + alias, span);
        decls.emplace_back("@" + alias, t);
        added.push_back(alias);
    });
    if (added.empty()) return added;

    for (auto& item : extra) q.projections.push_back(std::move(item));
    for (const auto& [var, _] : decls) {
        v.priming->vars.push_back(var);
        v.loop->body.back().as<FetchStmt>()->vars.push_back(var);
    }
    Span span = (*v.block)[static_cast<std::size_t>(region.declare_index)].span;
    std::vector<Stmt> new_decls;
    for (const auto& [var, t] : decls) new_decls.push_back(make_stmt(DeclareStmt{var, TypeRef::of(t), std::nullopt}, span));
    v.block->insert(v.block->begin() + region.declare_index, new_decls.begin(), new_decls.end());
    return added;
}

QuerySpec for_iteration_query(const ForStmt& f, const std::string& cte_name) {
    const std::string& var = f.init.var;
    if (f.incr.var != var) not_convertible("FOR increments " + f.incr.var + " but initializes " + var, f.cond.span);
    if (contains_subquery(f.cond) || contains_subquery(f.incr.value))
        not_convertible("FOR condition or increment contains a subquery", f.cond.span);
    const std::string col = var.substr(1);
    auto as_column = [&](Expr e) {
        rewrite_shallow(e, [&](Expr& x) {
            if (const auto* v = x.as<VarExpr>(); v && !v->param && v->name == var) x = make_column("", col);
        });
        return e;
    };
    Expr cond = as_column(f.cond);

    QuerySpec base;
    base.projections.push_back(SelectItem{f.init.value, col, false, ""});
    QuerySpec rec;
    rec.projections.push_back(SelectItem{as_column(f.incr.value), col, false, ""});
    rec.from.push_back(FromItem{cte_name, std::nullopt, "", {}});
    rec.where = cond;

    QuerySpec q;
    q.cte = RecursiveCte{cte_name, {col}, Box<QuerySpec>(std::move(base)), Box<QuerySpec>(std::move(rec))};
    q.projections.push_back(SelectItem{make_column("", col), "", false, ""});
    q.from.push_back(FromItem{cte_name, std::nullopt, "", {}});
    q.where = cond;
    return q;
}

void for_to_cursor(Block& block, std::size_t index, const std::string& cursor, bool induction_live_after) {
    const Stmt original = block[index];
    const ForStmt& f = *original.as<ForStmt>();
    const Span span = original.span;
    const std::string& var = f.init.var;
    QuerySpec q = for_iteration_query(f);

    std::vector<Stmt> out;
    out.push_back(make_stmt(CursorDeclareStmt{cursor, q}, span));
    out.push_back(make_stmt(CursorOpenStmt{cursor}, span));
    out.push_back(make_stmt(FetchStmt{cursor, {var}}, span));
    WhileStmt loop;
    loop.fetch_cursor = cursor;
    loop.body = f.body;
    loop.body.push_back(make_stmt(FetchStmt{cursor, {var}}, span));
    out.push_back(make_stmt(std::move(loop), span));
    out.push_back(make_stmt(CursorCloseStmt{cursor}, span));
    out.push_back(make_stmt(CursorDeallocateStmt{cursor}, span));
    if (induction_live_after) {
        // The value that failed the condition: the last row the recursion
        // generates.
        QuerySpec last = q;
        last.where = make_unary(UnaryOp::Not, Expr{FuncExpr{"coalesce", {*q.where, make_const(Value::boolean(false))}}, {}});
        out.push_back(make_stmt(AssignStmt{var, Expr{SubqueryExpr{Box<QuerySpec>(std::move(last))}, span}}, span));
    }
    block.erase(block.begin() + static_cast<std::ptrdiff_t>(index));
    block.insert(block.begin() + static_cast<std::ptrdiff_t>(index), out.begin(), out.end());
}

namespace {

bool find_for(Block& b, BlockPath& path, std::size_t& index, const std::vector<Span>& skip) {
    for (std::size_t i = 0; i < b.size(); ++i) {
        Stmt& s = b[i];
        if (s.as<ForStmt>() &&
            std::none_of(skip.begin(), skip.end(), [&](const Span& x) { return x.same_position(s.span); })) {
            index = i;
            return true;
        }
        auto children = child_blocks(s);
        for (std::size_t slot = 0; slot < children.size(); ++slot) {
            path.emplace_back(static_cast<int>(i), static_cast<int>(slot));
            if (find_for(*children[slot], path, index, skip)) return true;
            path.pop_back();
        }
    }
    return false;
}

} // namespace

int convert_for_loops(Program& p, std::vector<std::string>* notes) {
    std::vector<Span> skip;
    int converted = 0;
    for (;;) {
        BlockPath path;
        std::size_t index = 0;
        if (!find_for(p.body, path, index, skip)) break;
        Block& block = block_at(p.body, path);
        const Stmt& s = block[index];
        const ForStmt& f = *s.as<ForStmt>();
        try {
            const std::string& var = f.init.var;
            auto types = declared_types(p);
            auto it = types.find(var);
            if (it == types.end() || it->second.is_table() || it->second.scalar != ScalarType::Int)
                not_convertible("induction variable " + var + " is not INT", s.span);
            if (infer_type(f.init.value, types) != ScalarType::Int || infer_type(f.incr.value, types) != ScalarType::Int)
                not_convertible("FOR bounds of " + var + " are not INT expressions", s.span);
            auto written = written_vars(f.body);
            auto writes = [&](const std::string& x) {
                return std::find(written.begin(), written.end(), x) != written.end();
            };
            if (writes(var)) not_convertible("FOR body writes its induction variable " + var, s.span);
            std::vector<std::string> reads = vars_of(f.cond);
            collect_vars(f.incr.value, reads);
            for (const auto& x : reads)
                if (x != var && writes(x)) not_convertible("FOR body writes " + x + ", read by its bounds", s.span);
            for_iteration_query(f);

            Cfg cfg = build_cfg(p);
            DataflowFacts facts = analyze(cfg);
            bool live = false;
            for (const auto& n : cfg.nodes) {
                if (n.kind != NodeKind::ForCond || n.stmt != &s) continue;
                for (const auto& e : cfg.edges)
                    if (e.from == n.id && e.label == EdgeLabel::False) live = facts.live_at_entry(e.to, var);
            }
            std::set<std::string> cursors;
            walk_stmts(p.body, [&](const Stmt& x) {
                if (const auto* d = x.as<CursorDeclareStmt>()) cursors.insert(lower(d->cursor));
            });
            std::string name = "for_cur";
            for (int n = 1;; ++n) {
                name = "for_cur" + std::to_string(n);
                if (!cursors.count(name)) break;
            }
            skip.push_back(s.span);
            for_to_cursor(block, index, name, live);
            ++converted;
        } catch (const Error& e) {
            if (e.kind() != ErrorKind::NotConvertible) throw;
            skip.push_back(s.span);
            if (notes) notes->push_back(e.what());
        }
    }
    return converted;
}

} // namespace aggify
