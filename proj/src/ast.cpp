#include "aggify/ast.hpp"

#include <algorithm>

namespace aggify {

std::string to_string(const Span& span) {
    return std::to_string(span.line) + ":" + std::to_string(span.column);
}

std::string_view to_string(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::Lex: return "LexError";
    case ErrorKind::Parse: return "ParseError";
    case ErrorKind::UnsupportedConstruct: return "UnsupportedConstruct";
    case ErrorKind::MalformedCursorUse: return "MalformedCursorUse";
    case ErrorKind::NotConvertible: return "NotConvertible";
    case ErrorKind::Schema: return "SchemaError";
    case ErrorKind::DuplicateTable: return "DuplicateTable";
    case ErrorKind::Type: return "TypeError";
    case ErrorKind::Runtime: return "RuntimeError";
    case ErrorKind::ArithmeticOverflow: return "ArithmeticOverflow";
    case ErrorKind::UnknownAggregate: return "UnknownAggregate";
    case ErrorKind::DepthExceeded: return "DepthExceeded";
    case ErrorKind::Usage: return "UsageError";
    case ErrorKind::Io: return "IoError";
    }
    return "Error";
}

namespace {
std::string format_error(ErrorKind kind, const std::string& message, const Span& span) {
    std::string out(to_string(kind));
    if (span.valid()) out += " at " + to_string(span);
    return out + ": " + message;
}
} // namespace

Error::Error(ErrorKind kind, std::string message, Span span)
    : std::runtime_error(format_error(kind, message, span)), kind_(kind), span_(span), detail_(std::move(message)) {}

Expr make_const(Value v, Span span) { return Expr{ConstExpr{std::move(v)}, span}; }
Expr make_var(std::string name, Span span) { return Expr{VarExpr{std::move(name), false}, span}; }
Expr make_param_ref(std::string name) { return Expr{VarExpr{std::move(name), true}, {}}; }
Expr make_column(std::string qualifier, std::string name) {
    return Expr{ColumnExpr{std::move(qualifier), std::move(name)}, {}};
}
Expr make_unary(UnaryOp op, Expr operand) {
    Span s = operand.span;
    return Expr{UnaryExpr{op, Box<Expr>(std::move(operand))}, s};
}
Expr make_binary(BinaryOp op, Expr lhs, Expr rhs) {
    Span s = lhs.span;
    return Expr{BinaryExpr{op, Box<Expr>(std::move(lhs)), Box<Expr>(std::move(rhs))}, s};
}
Stmt make_stmt(Stmt::Node node, Span span) { return Stmt{std::move(node), span}; }

void visit_shallow(const Expr& e, const std::function<void(const Expr&)>& fn) {
    fn(e);
    std::visit(
        [&](const auto& n) {
            using T = std::decay_t<decltype(n)>;
            if constexpr (std::is_same_v<T, UnaryExpr>) {
                visit_shallow(*n.operand, fn);
            } else if constexpr (std::is_same_v<T, BinaryExpr>) {
                visit_shallow(*n.lhs, fn);
                visit_shallow(*n.rhs, fn);
            } else if constexpr (std::is_same_v<T, FuncExpr>) {
                for (const auto& a : n.args) visit_shallow(a, fn);
            } else if constexpr (std::is_same_v<T, AggregateExpr>) {
                for (const auto& a : n.args) visit_shallow(a, fn);
                for (const auto& o : n.within_order) visit_shallow(o.expr, fn);
            }
        },
        e.node);
}

void rewrite_shallow(Expr& e, const std::function<void(Expr&)>& fn) {
    std::visit(
        [&](auto& n) {
            using T = std::decay_t<decltype(n)>;
            if constexpr (std::is_same_v<T, UnaryExpr>) {
                rewrite_shallow(*n.operand, fn);
            } else if constexpr (std::is_same_v<T, BinaryExpr>) {
                rewrite_shallow(*n.lhs, fn);
                rewrite_shallow(*n.rhs, fn);
            } else if constexpr (std::is_same_v<T, FuncExpr>) {
                for (auto& a : n.args) rewrite_shallow(a, fn);
            } else if constexpr (std::is_same_v<T, AggregateExpr>) {
                for (auto& a : n.args) rewrite_shallow(a, fn);
                for (auto& o : n.within_order) rewrite_shallow(o.expr, fn);
            }
        },
        e.node);
    fn(e);
}

namespace {

void push_unique(std::vector<std::string>& out, const std::string& v) {
    if (std::find(out.begin(), out.end(), v) == out.end()) out.push_back(v);
}

} // namespace

void collect_vars(const Expr& e, std::vector<std::string>& out) {
    visit_shallow(e, [&](const Expr& x) {
        if (const auto* v = x.as<VarExpr>()) push_unique(out, v->name);
        if (const auto* s = x.as<SubqueryExpr>()) collect_vars(*s->query, out);
    });
}

void collect_vars(const QuerySpec& q, std::vector<std::string>& out) {
    if (q.cte) {
        collect_vars(*q.cte->base, out);
        collect_vars(*q.cte->recursive, out);
    }
    for (const auto& f : q.from) {
        if (f.subquery) collect_vars(**f.subquery, out);
        else if (!f.table.empty() && f.table[0] == '@') push_unique(out, f.table);
    }
    for (const auto& p : q.projections)
        if (!p.star) collect_vars(p.expr, out);
    if (q.where) collect_vars(*q.where, out);
    for (const auto& g : q.group_by) collect_vars(g, out);
    if (q.having) collect_vars(*q.having, out);
    for (const auto& o : q.order_by) collect_vars(o.expr, out);
}

std::vector<std::string> vars_of(const Expr& e) {
    std::vector<std::string> out;
    collect_vars(e, out);
    return out;
}

std::vector<std::string> vars_of(const QuerySpec& q) {
    std::vector<std::string> out;
    collect_vars(q, out);
    return out;
}

void rename_var(Expr& e, const std::string& from, const std::string& to) {
    rewrite_shallow(e, [&](Expr& x) {
        if (auto* v = x.as<VarExpr>(); v && v->name == from) v->name = to;
        if (auto* s = x.as<SubqueryExpr>()) rename_var(*s->query, from, to);
    });
}

void rename_var(QuerySpec& q, const std::string& from, const std::string& to) {
    if (q.cte) {
        rename_var(*q.cte->base, from, to);
        rename_var(*q.cte->recursive, from, to);
    }
    for (auto& f : q.from) {
        if (f.subquery) rename_var(**f.subquery, from, to);
        else if (f.table == from) f.table = to;
    }
    for (auto& p : q.projections)
        if (!p.star) rename_var(p.expr, from, to);
    if (q.where) rename_var(*q.where, from, to);
    for (auto& g : q.group_by) rename_var(g, from, to);
    if (q.having) rename_var(*q.having, from, to);
    for (auto& o : q.order_by) rename_var(o.expr, from, to);
}

bool contains_subquery(const Expr& e) {
    bool found = false;
    visit_shallow(e, [&](const Expr& x) { found = found || x.as<SubqueryExpr>() != nullptr; });
    return found;
}

bool contains_aggregate(const Expr& e) {
    bool found = false;
    visit_shallow(e, [&](const Expr& x) { found = found || x.as<AggregateExpr>() != nullptr; });
    return found;
}

std::vector<const Block*> child_blocks(const Stmt& s) {
    if (const auto* i = s.as<IfStmt>()) return {&i->then_block, &i->else_block};
    if (const auto* w = s.as<WhileStmt>()) return {&w->body};
    if (const auto* f = s.as<ForStmt>()) return {&f->body};
    return {};
}

std::vector<Block*> child_blocks(Stmt& s) {
    if (auto* i = s.as<IfStmt>()) return {&i->then_block, &i->else_block};
    if (auto* w = s.as<WhileStmt>()) return {&w->body};
    if (auto* f = s.as<ForStmt>()) return {&f->body};
    return {};
}

void walk_stmts(const Block& b, const std::function<void(const Stmt&)>& fn) {
    for (const auto& s : b) {
        fn(s);
        for (const Block* child : child_blocks(s)) walk_stmts(*child, fn);
    }
}

std::vector<std::string> referenced_vars(const Block& b) {
    std::vector<std::string> out;
    walk_stmts(b, [&](const Stmt& s) {
        std::visit(
            [&](const auto& n) {
                using T = std::decay_t<decltype(n)>;
                if constexpr (std::is_same_v<T, DeclareStmt>) {
                    push_unique(out, n.var);
                    if (n.init) collect_vars(*n.init, out);
                } else if constexpr (std::is_same_v<T, AssignStmt>) {
                    push_unique(out, n.var);
                    collect_vars(n.value, out);
                } else if constexpr (std::is_same_v<T, AssignQueryStmt>) {
                    for (const auto& v : n.vars) push_unique(out, v);
                    collect_vars(n.query, out);
                } else if constexpr (std::is_same_v<T, IfStmt>) {
                    collect_vars(n.cond, out);
                } else if constexpr (std::is_same_v<T, WhileStmt>) {
                    if (n.cond) collect_vars(*n.cond, out);
                } else if constexpr (std::is_same_v<T, ForStmt>) {
                    push_unique(out, n.init.var);
                    collect_vars(n.init.value, out);
                    collect_vars(n.cond, out);
                    push_unique(out, n.incr.var);
                    collect_vars(n.incr.value, out);
                } else if constexpr (std::is_same_v<T, CursorDeclareStmt>) {
                    collect_vars(n.query, out);
                } else if constexpr (std::is_same_v<T, FetchStmt>) {
                    for (const auto& v : n.vars) push_unique(out, v);
                } else if constexpr (std::is_same_v<T, InsertLocalStmt>) {
                    push_unique(out, n.table);
                    for (const auto& v : n.values) collect_vars(v, out);
                } else if constexpr (std::is_same_v<T, ReturnStmt>) {
                    if (n.value) collect_vars(*n.value, out);
                } else if constexpr (std::is_same_v<T, DmlStmt>) {
                    for (const auto& a : n.assignments) collect_vars(a.value, out);
                    for (const auto& v : n.values) collect_vars(v, out);
                    if (n.where) collect_vars(*n.where, out);
                }
            },
            s.node);
    });
    return out;
}

std::vector<std::string> written_vars(const Block& b) {
    std::vector<std::string> out;
    auto note = [&](const std::string& v) {
        if (std::find(out.begin(), out.end(), v) == out.end()) out.push_back(v);
    };
    walk_stmts(b, [&](const Stmt& s) {
        if (const auto* d = s.as<DeclareStmt>()) note(d->var);
        else if (const auto* a = s.as<AssignStmt>()) note(a->var);
        else if (const auto* q = s.as<AssignQueryStmt>())
            for (const auto& v : q->vars) note(v);
        else if (const auto* f = s.as<FetchStmt>())
            for (const auto& v : f->vars) note(v);
        else if (const auto* i = s.as<InsertLocalStmt>()) note(i->table);
        else if (const auto* fr = s.as<ForStmt>()) {
            note(fr->init.var);
            note(fr->incr.var);
        }
    });
    return out;
}

std::map<std::string, TypeRef> declared_types(const Program& p) {
    std::map<std::string, TypeRef> out;
    for (const auto& prm : p.params) out.emplace(prm.name, prm.type);
    walk_stmts(p.body, [&](const Stmt& s) {
        if (const auto* d = s.as<DeclareStmt>()) out.emplace(d->var, d->type);
    });
    return out;
}

std::vector<std::string> declaration_order(const Program& p) {
    std::vector<std::string> out;
    auto note = [&](const std::string& v) {
        if (std::find(out.begin(), out.end(), v) == out.end()) out.push_back(v);
    };
    for (const auto& prm : p.params) note(prm.name);
    walk_stmts(p.body, [&](const Stmt& s) {
        if (const auto* d = s.as<DeclareStmt>()) note(d->var);
    });
    return out;
}

std::optional<ScalarType> infer_type(const Expr& e, const std::map<std::string, TypeRef>& vars) {
    using R = std::optional<ScalarType>;
    auto numeric = [](R a, R b) -> R {
        if (!a || !b) return std::nullopt;
        if ((*a != ScalarType::Int && *a != ScalarType::Decimal) || (*b != ScalarType::Int && *b != ScalarType::Decimal))
            return std::nullopt;
        return *a == ScalarType::Decimal || *b == ScalarType::Decimal ? ScalarType::Decimal : ScalarType::Int;
    };
    return std::visit(
        [&](const auto& n) -> R {
            using T = std::decay_t<decltype(n)>;
            if constexpr (std::is_same_v<T, ConstExpr>) {
                if (n.value.is_null()) return std::nullopt;
                return n.value.type();
            } else if constexpr (std::is_same_v<T, VarExpr>) {
                auto it = vars.find(n.name);
                if (it == vars.end() || it->second.is_table()) return std::nullopt;
                return it->second.scalar;
            } else if constexpr (std::is_same_v<T, UnaryExpr>) {
                if (n.op == UnaryOp::Neg) return numeric(infer_type(*n.operand, vars), ScalarType::Int);
                return ScalarType::Bool;
            } else if constexpr (std::is_same_v<T, BinaryExpr>) {
                switch (n.op) {
                case BinaryOp::Add:
                case BinaryOp::Sub:
                case BinaryOp::Mul:
                case BinaryOp::Div:
                    return numeric(infer_type(*n.lhs, vars), infer_type(*n.rhs, vars));
                case BinaryOp::Mod: {
                    R r = numeric(infer_type(*n.lhs, vars), infer_type(*n.rhs, vars));
                    return r == ScalarType::Int ? r : std::nullopt;
                }
                default: return ScalarType::Bool;
                }
            } else if constexpr (std::is_same_v<T, FuncExpr>) {
                if (n.name == "concat" || n.name == "upper") return ScalarType::Varchar;
                if (n.name == "abs" && n.args.size() == 1) return numeric(infer_type(n.args[0], vars), ScalarType::Int);
                if (n.name == "coalesce") {
                    R found;
                    for (const auto& a : n.args) {
                        R t = infer_type(a, vars);
                        if (!t) return std::nullopt;
                        if (found && *found != *t) return std::nullopt;
                        found = t;
                    }
                    return found;
                }
                return std::nullopt;
            } else {
                return std::nullopt;
            }
        },
        e.node);
}

Block& block_at(Block& root, const BlockPath& path) {
    Block* b = &root;
    for (auto [index, slot] : path) b = child_blocks((*b)[static_cast<std::size_t>(index)])[static_cast<std::size_t>(slot)];
    return *b;
}

const Block& block_at(const Block& root, const BlockPath& path) {
    const Block* b = &root;
    for (auto [index, slot] : path)
        b = child_blocks((*b)[static_cast<std::size_t>(index)])[static_cast<std::size_t>(slot)];
    return *b;
}

std::string_view to_string(BinaryOp op) {
    switch (op) {
    case BinaryOp::Add: return "+";
    case BinaryOp::Sub: return "-";
    case BinaryOp::Mul: return "*";
    case BinaryOp::Div: return "/";
    case BinaryOp::Mod: return "%";
    case BinaryOp::Eq: return "=";
    case BinaryOp::Ne: return "<>";
    case BinaryOp::Lt: return "<";
    case BinaryOp::Le: return "<=";
    case BinaryOp::Gt: return ">";
    case BinaryOp::Ge: return ">=";
    case BinaryOp::And: return "AND";
    case BinaryOp::Or: return "OR";
    }
    return "?";
}

} // namespace aggify
