#include <sstream>

#include "aggify/frontend.hpp"

namespace aggify {

namespace {

int precedence(BinaryOp op) {
    switch (op) {
    case BinaryOp::Or: return 1;
    case BinaryOp::And: return 2;
    case BinaryOp::Eq:
    case BinaryOp::Ne:
    case BinaryOp::Lt:
    case BinaryOp::Le:
    case BinaryOp::Gt:
    case BinaryOp::Ge: return 4;
    case BinaryOp::Add:
    case BinaryOp::Sub: return 5;
    case BinaryOp::Mul:
    case BinaryOp::Div:
    case BinaryOp::Mod: return 6;
    }
    return 0;
}

int precedence(const Expr& e) {
    if (const auto* b = e.as<BinaryExpr>()) return precedence(b->op);
    if (const auto* u = e.as<UnaryExpr>()) {
        switch (u->op) {
        case UnaryOp::Not: return 3;
        case UnaryOp::IsNull:
        case UnaryOp::IsNotNull: return 4;
        case UnaryOp::Neg: return 7;
        }
    }
    return 8;
}

bool numeric_const(const Expr& e) {
    const auto* c = e.as<ConstExpr>();
    return c && (c->value.is_int() || c->value.is_decimal());
}

bool starts_with_minus(const Expr& e) {
    if (const auto* c = e.as<ConstExpr>()) return c->value.to_literal().rfind('-', 0) == 0;
    if (const auto* u = e.as<UnaryExpr>()) return u->op == UnaryOp::Neg;
    return false;
}

std::string wrap(const Expr& e, bool paren) {
    std::string s = print_expr(e);
    return paren ? "(" + s + ")" : s;
}

std::string join(const std::vector<std::string>& parts, std::string_view sep) {
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i) out += sep;
        out += parts[i];
    }
    return out;
}

std::string order_list(const std::vector<OrderItem>& items) {
    std::vector<std::string> parts;
    for (const auto& o : items) parts.push_back(print_expr(o.expr) + (o.descending ? " DESC" : ""));
    return join(parts, ", ");
}

std::string select_text(const QuerySpec& q) {
    std::string out = "SELECT ";
    if (q.top) out += "TOP " + std::to_string(*q.top) + " ";
    std::vector<std::string> items;
    for (const auto& p : q.projections) {
        if (p.star) {
            items.push_back(p.star_qualifier.empty() ? "*" : p.star_qualifier + ".*");
        } else {
            items.push_back(print_expr(p.expr) + (p.alias.empty() ? "" : " AS " + p.alias));
        }
    }
    out += join(items, ", ");
    if (!q.from.empty()) {
        std::vector<std::string> from;
        for (const auto& f : q.from) {
            std::string s;
            if (f.subquery) {
                s = "(" + print_query(**f.subquery) + ") AS " + f.alias;
                if (!f.column_aliases.empty()) s += "(" + join(f.column_aliases, ", ") + ")";
            } else {
                s = f.table;
                if (!f.alias.empty()) s += " AS " + f.alias;
            }
            from.push_back(std::move(s));
        }
        out += " FROM " + join(from, ", ");
    }
    if (q.where) out += " WHERE " + print_expr(*q.where);
    if (!q.group_by.empty()) {
        std::vector<std::string> g;
        for (const auto& e : q.group_by) g.push_back(print_expr(e));
        out += " GROUP BY " + join(g, ", ");
    }
    if (q.having) out += " HAVING " + print_expr(*q.having);
    if (!q.order_by.empty()) out += " ORDER BY " + order_list(q.order_by);
    return out;
}

std::string params_text(const std::vector<Param>& params) {
    std::vector<std::string> parts;
    for (const auto& p : params) {
        std::string s = p.name + " " + print_type(p.type);
        if (p.default_value) s += " = " + print_expr(*p.default_value);
        parts.push_back(std::move(s));
    }
    return "(" + join(parts, ", ") + ")";
}

class BlockPrinter {
public:
    explicit BlockPrinter(std::ostringstream& out) : out_(out) {}

    void block(const Block& b, int indent) {
        for (const auto& s : b) stmt(s, indent);
    }

    // BEGIN on the current line, body indented, END at `indent`.
    void braced(const Block& b, int indent) {
        out_ << "BEGIN\n";
        block(b, indent + 1);
        pad(indent);
        out_ << "END";
    }

private:
    void pad(int indent) { out_ << std::string(static_cast<std::size_t>(indent) * 4, ' '); }

    void stmt(const Stmt& s, int indent) {
        pad(indent);
        std::visit(
            [&](const auto& n) {
                using T = std::decay_t<decltype(n)>;
                if constexpr (std::is_same_v<T, DeclareStmt>) {
                    out_ << "DECLARE " << n.var << " " << print_type(n.type);
                    if (n.init) out_ << " = " << print_expr(*n.init);
                    out_ << ";";
                } else if constexpr (std::is_same_v<T, AssignStmt>) {
                    out_ << "SET " << n.var << " = " << print_expr(n.value) << ";";
                } else if constexpr (std::is_same_v<T, AssignQueryStmt>) {
                    out_ << "SET (" << join(n.vars, ", ") << ") = (" << print_query(n.query) << ");";
                } else if constexpr (std::is_same_v<T, IfStmt>) {
                    out_ << "IF " << print_expr(n.cond) << " ";
                    braced(n.then_block, indent);
                    if (!n.else_block.empty()) {
                        out_ << " ELSE ";
                        braced(n.else_block, indent);
                    }
                } else if constexpr (std::is_same_v<T, WhileStmt>) {
                    out_ << "WHILE " << (n.cond ? print_expr(*n.cond) : std::string("@@FETCH_STATUS = 0")) << " ";
                    braced(n.body, indent);
                } else if constexpr (std::is_same_v<T, ForStmt>) {
                    out_ << "FOR (" << n.init.var << " = " << print_expr(n.init.value) << "; " << print_expr(n.cond)
                         << "; " << n.incr.var << " = " << print_expr(n.incr.value) << ") ";
                    braced(n.body, indent);
                } else if constexpr (std::is_same_v<T, CursorDeclareStmt>) {
                    out_ << "DECLARE " << n.cursor << " CURSOR FOR " << print_query(n.query) << ";";
                } else if constexpr (std::is_same_v<T, CursorOpenStmt>) {
                    out_ << "OPEN " << n.cursor << ";";
                } else if constexpr (std::is_same_v<T, FetchStmt>) {
                    out_ << "FETCH NEXT FROM " << n.cursor << " INTO " << join(n.vars, ", ") << ";";
                } else if constexpr (std::is_same_v<T, CursorCloseStmt>) {
                    out_ << "CLOSE " << n.cursor << ";";
                } else if constexpr (std::is_same_v<T, CursorDeallocateStmt>) {
                    out_ << "DEALLOCATE " << n.cursor << ";";
                } else if constexpr (std::is_same_v<T, InsertLocalStmt>) {
                    std::vector<std::string> vals;
                    for (const auto& v : n.values) vals.push_back(print_expr(v));
                    out_ << "INSERT INTO " << n.table << " VALUES (" << join(vals, ", ") << ");";
                } else if constexpr (std::is_same_v<T, ReturnStmt>) {
                    out_ << "RETURN" << (n.value ? " " + print_expr(*n.value) : std::string()) << ";";
                } else if constexpr (std::is_same_v<T, SkipStmt>) {
                    out_ << "SKIP;";
                } else if constexpr (std::is_same_v<T, DmlStmt>) {
                    switch (n.kind) {
                    case DmlKind::Insert: {
                        std::vector<std::string> vals;
                        for (const auto& v : n.values) vals.push_back(print_expr(v));
                        out_ << "INSERT INTO " << n.table << " VALUES (" << join(vals, ", ") << ")";
                        break;
                    }
                    case DmlKind::Update: {
                        std::vector<std::string> sets;
                        for (const auto& a : n.assignments) sets.push_back(a.column + " = " + print_expr(a.value));
                        out_ << "UPDATE " << n.table << " SET " << join(sets, ", ");
                        break;
                    }
                    case DmlKind::Delete: out_ << "DELETE FROM " << n.table; break;
                    }
                    if (n.where) out_ << " WHERE " << print_expr(*n.where);
                    out_ << ";";
                }
            },
            s.node);
        out_ << "\n";
    }

    std::ostringstream& out_;
};

} // namespace

std::string print_expr(const Expr& e) {
    return std::visit(
        [&](const auto& n) -> std::string {
            using T = std::decay_t<decltype(n)>;
            if constexpr (std::is_same_v<T, ConstExpr>) {
                return n.value.to_literal();
            } else if constexpr (std::is_same_v<T, VarExpr>) {
                return n.param ? "PARAM." + n.name : n.name;
            } else if constexpr (std::is_same_v<T, ColumnExpr>) {
                return n.qualifier.empty() ? n.name : n.qualifier + "." + n.name;
            } else if constexpr (std::is_same_v<T, UnaryExpr>) {
                const Expr& operand = *n.operand;
                int p = precedence(operand);
                switch (n.op) {
                case UnaryOp::Neg:
                    return "-" + wrap(operand, p < 7 || numeric_const(operand) || starts_with_minus(operand));
                case UnaryOp::Not: return "NOT " + wrap(operand, p < 3);
                case UnaryOp::IsNull: return wrap(operand, p < 4) + " IS NULL";
                case UnaryOp::IsNotNull: return wrap(operand, p < 4) + " IS NOT NULL";
                }
                return "";
            } else if constexpr (std::is_same_v<T, BinaryExpr>) {
                int p = precedence(n.op);
                return wrap(*n.lhs, precedence(*n.lhs) < p) + " " + std::string(to_string(n.op)) + " " +
                       wrap(*n.rhs, precedence(*n.rhs) <= p);
            } else if constexpr (std::is_same_v<T, FuncExpr>) {
                std::vector<std::string> args;
                for (const auto& a : n.args) args.push_back(print_expr(a));
                return n.name + "(" + join(args, ", ") + ")";
            } else if constexpr (std::is_same_v<T, SubqueryExpr>) {
                return "(" + print_query(*n.query) + ")";
            } else if constexpr (std::is_same_v<T, AggregateExpr>) {
                std::string out = n.name + "(";
                if (n.star) {
                    out += "*";
                } else {
                    std::vector<std::string> args;
                    for (const auto& a : n.args) args.push_back(print_expr(a));
                    out += join(args, ", ");
                }
                out += ")";
                if (n.order_sensitive()) out += " WITHIN GROUP (ORDER BY " + order_list(n.within_order) + ")";
                return out;
            }
        },
        e.node);
}

std::string print_query(const QuerySpec& q) {
    if (!q.cte) return select_text(q);
    const RecursiveCte& c = *q.cte;
    return "WITH " + c.name + "(" + join(c.columns, ", ") + ") AS (" + select_text(*c.base) + " UNION ALL " +
           select_text(*c.recursive) + ") " + select_text(q);
}

std::string print_type(const TypeRef& t) {
    if (!t.is_table()) return std::string(to_string(t.scalar));
    std::vector<std::string> cols;
    for (const auto& c : t.table_columns) cols.push_back(c.name + " " + std::string(to_string(c.type)));
    return "TABLE (" + join(cols, ", ") + ")";
}

std::string print_block(const Block& b, int indent) {
    std::ostringstream out;
    BlockPrinter(out).block(b, indent);
    return out.str();
}

std::string print_aggregate(const AggregateDef& a) {
    std::ostringstream out;
    BlockPrinter bp(out);
    out << "CREATE AGGREGATE " << a.name << params_text(a.params) << "\n";
    out << "FIELDS " << params_text(a.fields) << "\n";
    out << "INIT ";
    bp.braced(a.init_body, 0);
    out << "\nACCUMULATE ";
    bp.braced(a.accumulate_body, 0);
    out << "\nTERMINATE (" << join(a.terminate, ", ") << ");\n";
    return out.str();
}

std::string pretty_print(const Program& p) {
    std::ostringstream out;
    for (const auto& a : p.aggregates) out << print_aggregate(a) << "\n";
    out << "CREATE " << (p.kind == RoutineKind::Function ? "FUNCTION " : "PROCEDURE ") << p.name
        << params_text(p.params);
    if (p.return_type) out << " RETURNS " << to_string(*p.return_type);
    out << " AS\n";
    BlockPrinter(out).braced(p.body, 0);
    out << "\n";
    return out.str();
}

} // namespace aggify
