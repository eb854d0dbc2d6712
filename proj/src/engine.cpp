#include "aggify/engine.hpp"

#include <algorithm>
#include <cctype>
#include <future>
#include <set>
#include <unordered_map>

namespace aggify {

namespace {

// Longest string a VARCHAR holds; longer concat results are runtime errors.
constexpr std::size_t kMaxVarchar = 8000;

bool iequals(std::string_view a, std::string_view b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (std::tolower(static_cast<unsigned char>(a[i])) != std::tolower(static_cast<unsigned char>(b[i])))
            return false;
    return true;
}

std::string lower(std::string s) {
    for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

struct Slot {
    Value value;
    TypeRef type;
};

using SlotMap = std::unordered_map<std::string, Slot>;

struct CursorState {
    std::vector<Row> rows;
    std::size_t pos = 0;
    bool open = false;
};

struct Frame {
    SlotMap locals;
    SlotMap* fields = nullptr;  // aggregate state, searched before locals
    std::unordered_map<std::string, CursorState> cursors;
    bool in_aggregate = false;
    int fetch_status = -1;
};

struct QCol {
    std::string source;
    std::string name;
    ScalarType type = ScalarType::Null;
};

constexpr int kAmbiguous = -2;

class Layout {
public:
    std::vector<QCol> cols;
    std::vector<std::size_t> source_of;  // input index per column

    int resolve(const ColumnExpr& c, const Expr* key) const {
        if (auto it = cache_.find(key); it != cache_.end()) return it->second;
        int found = -1;
        for (std::size_t i = 0; i < cols.size(); ++i) {
            if (!c.qualifier.empty() && !iequals(cols[i].source, c.qualifier)) continue;
            if (!iequals(cols[i].name, c.name)) continue;
            found = found >= 0 ? kAmbiguous : static_cast<int>(i);
            if (found == kAmbiguous) break;
        }
        cache_.emplace(key, found);
        return found;
    }

private:
    mutable std::unordered_map<const Expr*, int> cache_;
};

struct RowCtx {
    const Layout* layout = nullptr;
    const Row* row = nullptr;
    const std::vector<const Row*>* group = nullptr;
    const RowCtx* outer = nullptr;
    std::unordered_map<const Expr*, Value>* agg_cache = nullptr;
};

enum class Flow { Normal, Return };

std::vector<const Expr*> conjuncts(const Expr& e) {
    std::vector<const Expr*> out;
    std::vector<const Expr*> stack{&e};
    while (!stack.empty()) {
        const Expr* x = stack.back();
        stack.pop_back();
        if (const auto* b = x->as<BinaryExpr>(); b && b->op == BinaryOp::And) {
            stack.push_back(&*b->rhs);
            stack.push_back(&*b->lhs);
        } else {
            out.push_back(x);
        }
    }
    return out;
}

bool has_shallow_aggregate(const Expr& e) { return contains_aggregate(e); }

class Machine {
public:
    Machine(const Program* program, const Catalog& catalog, RunOptions options)
        : program_(program), catalog_(catalog), opts_(options) {}

    ExecStats stats;

    // ---- procedure entry ----
    RunResult run(const Program& p, const std::vector<Value>& args) {
        Frame top;
        frame_ = &top;
        if (args.size() > p.params.size())
            throw Error(ErrorKind::Usage, p.name + " takes " + std::to_string(p.params.size()) + " arguments, got " +
                                              std::to_string(args.size()));
        for (std::size_t i = 0; i < p.params.size(); ++i) {
            const Param& prm = p.params[i];
            Value v;
            if (i < args.size()) v = args[i];
            else if (prm.default_value) v = eval(*prm.default_value, nullptr);
            else throw Error(ErrorKind::Usage, "missing argument for " + prm.name);
            top.locals[prm.name] = Slot{coerce_to(v, prm.type), prm.type};
        }
        RunResult r;
        if (exec_block(p.body) == Flow::Return) {
            r.returned = true;
            r.return_value = return_value_;
            if (p.return_type) r.return_value = coerce(r.return_value, *p.return_type);
        }
        for (auto& [name, slot] : top.locals) {
            if (slot.type.is_table()) {
                r.tables[name] = slot.value.is_table() ? slot.value.as_table() : Relation{};
            } else {
                r.variables[name] = slot.value;
            }
        }
        r.stats = stats;
        frame_ = nullptr;
        return r;
    }

    Relation query_with_env(const QuerySpec& q, const std::map<std::string, Value>& env) {
        Frame top;
        for (const auto& [k, v] : env) top.locals[k] = Slot{v, TypeRef::of(v.type())};
        frame_ = &top;
        Relation r = eval_query(q, nullptr);
        frame_ = nullptr;
        return r;
    }

private:
    // ---- variables ----
    Slot* find_slot(const std::string& name, bool param_only) {
        if (!param_only && frame_->fields) {
            if (auto it = frame_->fields->find(name); it != frame_->fields->end()) return &it->second;
        }
        if (auto it = frame_->locals.find(name); it != frame_->locals.end()) return &it->second;
        return nullptr;
    }

    Slot& slot(const std::string& name, Span span, bool param_only = false) {
        Slot* s = find_slot(name, param_only);
        if (!s) throw Error(ErrorKind::Runtime, "variable " + name + " is not declared", span);
        return *s;
    }

    static Value coerce_to(const Value& v, const TypeRef& t) {
        if (t.is_table()) {
            if (v.is_null() || v.is_table()) return v;
            throw Error(ErrorKind::Type, "table variable assigned a scalar");
        }
        return coerce(v, t.scalar);
    }

    void assign(const std::string& name, const Value& v, Span span) {
        Slot& s = slot(name, span);
        try {
            s.value = coerce_to(v, s.type);
        } catch (const Error& e) {
            throw Error(e.kind(), e.detail() + " (assigning " + name + ")", span);
        }
    }

    // ---- expressions ----
    static bool truthy(const Value& v, Span span) {
        if (v.is_null()) return false;
        if (!v.is_bool()) throw Error(ErrorKind::Type, "condition is not boolean", span);
        return v.as_bool();
    }

    Value column_value(const Expr& e, const ColumnExpr& c, const RowCtx* ctx) {
        for (const RowCtx* level = ctx; level; level = level->outer) {
            int idx = level->layout->resolve(c, &e);
            if (idx == kAmbiguous) throw Error(ErrorKind::Schema, "ambiguous column " + c.name, e.span);
            if (idx >= 0) return level->row ? (*level->row)[static_cast<std::size_t>(idx)] : Value::null();
        }
        std::string full = c.qualifier.empty() ? c.name : c.qualifier + "." + c.name;
        if (!ctx) throw Error(ErrorKind::Schema, "column " + full + " referenced outside a query", e.span);
        throw Error(ErrorKind::Schema, "unknown column " + full, e.span);
    }

    Value eval(const Expr& e, const RowCtx* ctx) {
        return std::visit(
            [&](const auto& n) -> Value {
                using T = std::decay_t<decltype(n)>;
                if constexpr (std::is_same_v<T, ConstExpr>) {
                    return n.value;
                } else if constexpr (std::is_same_v<T, VarExpr>) {
                    return slot(n.name, e.span, n.param).value;
                } else if constexpr (std::is_same_v<T, ColumnExpr>) {
                    return column_value(e, n, ctx);
                } else if constexpr (std::is_same_v<T, UnaryExpr>) {
                    Value v = eval(*n.operand, ctx);
                    switch (n.op) {
                    case UnaryOp::Neg: return with_span(e.span, [&] { return negate(v); });
                    case UnaryOp::Not:
                        if (v.is_null()) return v;
                        if (!v.is_bool()) throw Error(ErrorKind::Type, "NOT of a non-boolean", e.span);
                        return Value::boolean(!v.as_bool());
                    case UnaryOp::IsNull: return Value::boolean(v.is_null());
                    case UnaryOp::IsNotNull: return Value::boolean(!v.is_null());
                    }
                    return Value::null();
                } else if constexpr (std::is_same_v<T, BinaryExpr>) {
                    return binary(e, n, ctx);
                } else if constexpr (std::is_same_v<T, FuncExpr>) {
                    return function(e, n, ctx);
                } else if constexpr (std::is_same_v<T, SubqueryExpr>) {
                    return scalar_subquery(e, *n.query, ctx);
                } else if constexpr (std::is_same_v<T, AggregateExpr>) {
                    return aggregate(e, n, ctx);
                }
            },
            e.node);
    }

    template <class F>
    static Value with_span(Span span, F&& f) {
        try {
            return f();
        } catch (const Error& err) {
            if (err.span().valid()) throw;
            throw Error(err.kind(), err.detail(), span);
        }
    }

    Value binary(const Expr& e, const BinaryExpr& b, const RowCtx* ctx) {
        if (b.op == BinaryOp::And || b.op == BinaryOp::Or) {
            Value l = eval(*b.lhs, ctx);
            auto as_tv = [&](const Value& v) -> std::optional<bool> {
                if (v.is_null()) return std::nullopt;
                if (!v.is_bool()) throw Error(ErrorKind::Type, "logical operand is not boolean", e.span);
                return v.as_bool();
            };
            auto lt = as_tv(l);
            bool is_and = b.op == BinaryOp::And;
            if (lt && *lt != is_and) return Value::boolean(*lt);
            auto rt = as_tv(eval(*b.rhs, ctx));
            if (rt && *rt != is_and) return Value::boolean(*rt);
            if (!lt || !rt) return Value::null();
            return Value::boolean(is_and);
        }
        Value l = eval(*b.lhs, ctx);
        Value r = eval(*b.rhs, ctx);
        return with_span(e.span, [&]() -> Value {
            switch (b.op) {
            case BinaryOp::Add: return add(l, r);
            case BinaryOp::Sub: return subtract(l, r);
            case BinaryOp::Mul: return multiply(l, r);
            case BinaryOp::Div: return divide(l, r);
            case BinaryOp::Mod: return modulo(l, r);
            default: break;
            }
            auto c = compare(l, r);
            if (!c) return Value::null();
            switch (b.op) {
            case BinaryOp::Eq: return Value::boolean(*c == 0);
            case BinaryOp::Ne: return Value::boolean(*c != 0);
            case BinaryOp::Lt: return Value::boolean(*c < 0);
            case BinaryOp::Le: return Value::boolean(*c <= 0);
            case BinaryOp::Gt: return Value::boolean(*c > 0);
            case BinaryOp::Ge: return Value::boolean(*c >= 0);
            default: return Value::null();
            }
        });
    }

    Value function(const Expr& e, const FuncExpr& f, const RowCtx* ctx) {
        std::vector<Value> args;
        for (const auto& a : f.args) args.push_back(eval(a, ctx));
        auto arity = [&](std::size_t n) {
            if (args.size() != n)
                throw Error(ErrorKind::Type, f.name + " expects " + std::to_string(n) + " argument(s)", e.span);
        };
        if (f.name == "coalesce") {
            for (const auto& v : args)
                if (!v.is_null()) return v;
            return Value::null();
        }
        if (f.name == "concat") {
            std::string out;
            for (const auto& v : args)
                if (!v.is_null()) out += v.to_display();
            if (out.size() > kMaxVarchar)
                throw Error(ErrorKind::Runtime, "concat result exceeds " + std::to_string(kMaxVarchar) + " characters",
                            e.span);
            return Value::varchar(std::move(out));
        }
        if (f.name == "abs") {
            arity(1);
            const Value& v = args[0];
            if (v.is_null()) return v;
            if (!v.is_int() && !v.is_decimal()) throw Error(ErrorKind::Type, "abs of a non-number", e.span);
            auto c = compare(v, Value::integer(0));
            return c && *c < 0 ? with_span(e.span, [&] { return negate(v); }) : v;
        }
        if (f.name == "upper") {
            arity(1);
            const Value& v = args[0];
            if (v.is_null()) return v;
            if (!v.is_varchar()) throw Error(ErrorKind::Type, "upper of a non-string", e.span);
            std::string s = v.as_varchar();
            for (auto& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
            return Value::varchar(std::move(s));
        }
        throw Error(ErrorKind::Type, "unknown function " + f.name, e.span);
    }

    bool top_level_client() const { return opts_.client_mode && !frame_->in_aggregate && query_depth_ == 0; }

    void count_client_row(const std::vector<Value>& values, const std::vector<ScalarType>& types) {
        stats.rows_moved_to_client += 1;
        for (std::size_t i = 0; i < values.size(); ++i)
            stats.bytes_moved_to_client += static_cast<std::int64_t>(value_width(values[i], types[i]));
    }

    Value scalar_subquery(const Expr& e, const QuerySpec& q, const RowCtx* ctx) {
        bool client = top_level_client();
        Relation r = eval_query(q, ctx);
        if (r.rows.empty()) return Value::null();
        if (r.rows.size() > 1) throw Error(ErrorKind::Runtime, "scalar subquery returned more than one row", e.span);
        if (r.columns.size() != 1) throw Error(ErrorKind::Runtime, "scalar subquery must return one column", e.span);
        Value v = r.rows[0][0];
        if (client) count_client_row({v}, {v.type()});
        return v;
    }

    // ---- aggregates ----
    const AggregateDef* find_aggregate(const std::string& name) const {
        if (!program_) return nullptr;
        for (const auto& a : program_->aggregates)
            if (iequals(a.name, name)) return &a;
        return nullptr;
    }

    Value aggregate(const Expr& e, const AggregateExpr& a, const RowCtx* ctx) {
        if (!ctx || !ctx->group) throw Error(ErrorKind::Type, "aggregate " + a.name + " used outside a query", e.span);
        if (auto it = ctx->agg_cache->find(&e); it != ctx->agg_cache->end()) return it->second;

        std::vector<const Row*> rows = *ctx->group;
        auto row_ctx = [&](const Row* r) { return RowCtx{ctx->layout, r, nullptr, ctx->outer, nullptr}; };
        if (a.order_sensitive()) {
            std::vector<std::vector<Value>> keys;
            for (const Row* r : rows) {
                RowCtx rc = row_ctx(r);
                std::vector<Value> k;
                for (const auto& o : a.within_order) k.push_back(eval(o.expr, &rc));
                keys.push_back(std::move(k));
            }
            std::vector<std::size_t> idx(rows.size());
            for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
            std::stable_sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) {
                for (std::size_t k = 0; k < a.within_order.size(); ++k) {
                    int c = sort_compare(keys[x][k], keys[y][k]);
                    if (c != 0) return a.within_order[k].descending ? c > 0 : c < 0;
                }
                return false;
            });
            std::vector<const Row*> sorted;
            for (auto i : idx) sorted.push_back(rows[i]);
            rows = std::move(sorted);
        }

        Value result;
        std::string up = a.name;
        for (auto& c : up) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
        if (up == "COUNT" || up == "SUM" || up == "MIN" || up == "MAX" || up == "AVG") {
            if (a.star) {
                if (up != "COUNT") throw Error(ErrorKind::Type, a.name + "(*) is not allowed", e.span);
                result = Value::integer(static_cast<std::int64_t>(rows.size()));
            } else {
                if (a.args.size() != 1) throw Error(ErrorKind::Type, a.name + " expects one argument", e.span);
                std::int64_t count = 0;
                Value acc;
                for (const Row* r : rows) {
                    RowCtx rc = row_ctx(r);
                    Value v = eval(a.args[0], &rc);
                    if (v.is_null()) continue;
                    ++count;
                    if (up == "COUNT") continue;
                    if (acc.is_null()) {
                        acc = v;
                        continue;
                    }
                    if (up == "SUM" || up == "AVG") {
                        acc = with_span(e.span, [&] { return add(acc, v); });
                    } else {
                        auto c = with_span(e.span, [&] { return Value::integer(*compare(v, acc)); });
                        if ((up == "MIN" && c.as_int() < 0) || (up == "MAX" && c.as_int() > 0)) acc = v;
                    }
                }
                if (up == "COUNT") result = Value::integer(count);
                else if (up == "AVG")
                    result = acc.is_null() ? acc
                                           : with_span(e.span, [&] {
                                                 Value num = acc.is_int() ? Value::decimal(Decimal::from_int(acc.as_int()))
                                                                          : acc;
                                                 return divide(num, Value::integer(count));
                                             });
                else result = acc;
            }
        } else {
            const AggregateDef* def = find_aggregate(a.name);
            if (!def) throw Error(ErrorKind::UnknownAggregate, "unknown aggregate " + a.name, e.span);
            result = run_custom(*def, a, rows, ctx, e.span);
        }
        ctx->agg_cache->emplace(&e, result);
        return result;
    }

    struct FrameGuard {
        Machine& m;
        Frame* saved;
        FrameGuard(Machine& machine, Frame* next) : m(machine), saved(machine.frame_) { m.frame_ = next; }
        ~FrameGuard() { m.frame_ = saved; }
    };

    Value run_custom(const AggregateDef& def, const AggregateExpr& call, const std::vector<const Row*>& rows,
                     const RowCtx* ctx, Span span) {
        if (call.star || call.args.size() != def.params.size())
            throw Error(ErrorKind::Type,
                        def.name + " expects " + std::to_string(def.params.size()) + " argument(s)", span);
        SlotMap fields;
        for (const auto& f : def.fields) fields[f.name] = Slot{Value::null(), f.type};
        if (opts_.observer) opts_.observer->on_init(def.name);
        {
            Frame fr;
            fr.fields = &fields;
            fr.in_aggregate = true;
            FrameGuard g(*this, &fr);
            if (exec_block(def.init_body) == Flow::Return)
                throw Error(ErrorKind::Runtime, "RETURN inside an aggregate", def.span);
        }
        for (const Row* r : rows) {
            RowCtx rc{ctx->layout, r, nullptr, ctx->outer, nullptr};
            std::vector<Value> args;
            for (const auto& x : call.args) args.push_back(eval(x, &rc));
            Frame fr;
            fr.fields = &fields;
            fr.in_aggregate = true;
            for (std::size_t i = 0; i < def.params.size(); ++i)
                fr.locals[def.params[i].name] = Slot{coerce_to(args[i], def.params[i].type), def.params[i].type};
            ++stats.accumulate_calls;
            if (opts_.observer) opts_.observer->on_accumulate(def.name, args);
            FrameGuard g(*this, &fr);
            if (exec_block(def.accumulate_body) == Flow::Return)
                throw Error(ErrorKind::Runtime, "RETURN inside an aggregate", def.span);
        }
        Value result;
        if (def.terminate.size() == 1) {
            result = fields.at(def.terminate[0]).value;
        } else {
            auto rec = std::make_shared<Record>();
            for (const auto& t : def.terminate) {
                const Slot& s = fields.at(t);
                rec->names.push_back(t);
                rec->types.push_back(s.type.scalar);
                rec->values.push_back(s.value);
            }
            result = Value::record(std::move(rec));
        }
        if (opts_.observer) opts_.observer->on_terminate(def.name, result);
        return result;
    }

    // ---- queries ----
    struct Input {
        std::string name;
        const Relation* rel = nullptr;
        std::shared_ptr<Relation> owned;
    };

    const Relation* lookup_table(const std::string& name) const {
        for (auto it = ctes_.rbegin(); it != ctes_.rend(); ++it)
            if (iequals(it->first, name)) return it->second;
        if (auto it = overlay_.find(lower(name)); it != overlay_.end()) return it->second.get();
        return catalog_.find(name);
    }

    static void rename_columns(Relation& r, const std::vector<std::string>& names, Span span) {
        if (names.empty()) return;
        if (names.size() != r.columns.size())
            throw Error(ErrorKind::Schema, "column alias count differs from query arity", span);
        for (std::size_t i = 0; i < names.size(); ++i) r.columns[i].name = names[i];
    }

    Relation eval_query(const QuerySpec& q, const RowCtx* outer) {
        ++query_depth_;
        struct DepthGuard {
            int& d;
            ~DepthGuard() { --d; }
        } guard{query_depth_};
        if (!q.cte) return eval_select(q, outer);

        const RecursiveCte& cte = *q.cte;
        auto all = std::make_shared<Relation>(eval_select(*cte.base, outer));
        rename_columns(*all, cte.columns, q.span);
        Relation delta = *all;
        std::int64_t depth = 0;
        while (!delta.rows.empty()) {
            if (++depth > opts_.cte_depth_cap)
                throw Error(ErrorKind::DepthExceeded, "recursive query " + cte.name + " exceeded its depth cap", q.span);
            ctes_.emplace_back(cte.name, &delta);
            Relation next;
            try {
                next = eval_select(*cte.recursive, outer);
            } catch (...) {
                ctes_.pop_back();
                throw;
            }
            ctes_.pop_back();
            if (next.columns.size() != all->columns.size())
                throw Error(ErrorKind::Schema, "recursive arm arity differs from base arity", q.span);
            rename_columns(next, cte.columns, q.span);
            all->rows.insert(all->rows.end(), next.rows.begin(), next.rows.end());
            delta = std::move(next);
        }
        ctes_.emplace_back(cte.name, all.get());
        Relation out;
        try {
            out = eval_select(q, outer);
        } catch (...) {
            ctes_.pop_back();
            throw;
        }
        ctes_.pop_back();
        return out;
    }

    std::vector<Input> resolve_inputs(const QuerySpec& q, const RowCtx* outer) {
        std::vector<Input> inputs;
        for (const auto& f : q.from) {
            Input in;
            in.name = f.effective_name();
            if (f.subquery) {
                in.owned = std::make_shared<Relation>(eval_query(**f.subquery, outer));
                rename_columns(*in.owned, f.column_aliases, q.span);
                in.rel = in.owned.get();
            } else if (!f.table.empty() && f.table[0] == '@') {
                Slot& s = slot(f.table, q.span);
                if (!s.type.is_table()) throw Error(ErrorKind::Type, f.table + " is not a table variable", q.span);
                if (s.value.is_table()) {
                    in.rel = &s.value.as_table();
                } else {
                    in.owned = std::make_shared<Relation>();
                    in.owned->columns = s.type.table_columns;
                    in.rel = in.owned.get();
                }
            } else {
                in.rel = lookup_table(f.table);
                if (!in.rel) throw Error(ErrorKind::Schema, "unknown table " + f.table, q.span);
            }
            inputs.push_back(std::move(in));
        }
        return inputs;
    }

    /// Highest input index a conjunct depends on; -1 when it reads no column
    /// of this query level.
    int conjunct_level(const Expr& c, const Layout& layout, int last) {
        int level = -1;
        bool pin_last = false;
        visit_shallow(c, [&](const Expr& x) {
            if (x.as<SubqueryExpr>() || x.as<AggregateExpr>()) pin_last = true;
            if (const auto* col = x.as<ColumnExpr>()) {
                int idx = layout.resolve(*col, &x);
                if (idx == kAmbiguous) pin_last = true;
                else if (idx >= 0) level = std::max(level, static_cast<int>(layout.source_of[static_cast<std::size_t>(idx)]));
            }
        });
        return pin_last ? last : level;
    }

    Relation eval_select(const QuerySpec& q, const RowCtx* outer) {
        std::vector<Input> inputs = resolve_inputs(q, outer);
        Layout layout;
        for (std::size_t i = 0; i < inputs.size(); ++i) {
            for (const auto& c : inputs[i].rel->columns) {
                layout.cols.push_back(QCol{inputs[i].name, c.name, c.type});
                layout.source_of.push_back(i);
            }
        }
        const int last = static_cast<int>(inputs.size()) - 1;
        std::vector<std::vector<const Expr*>> at_level(inputs.size() + 1);
        if (q.where) {
            for (const Expr* c : conjuncts(*q.where)) {
                int lvl = conjunct_level(*c, layout, last);
                at_level[static_cast<std::size_t>(lvl + 1)].push_back(c);
            }
        }

        // Nested-loop join in FROM order, filtering as soon as a conjunct's
        // inputs are bound.
        std::vector<Row> rows;
        Row buffer(layout.cols.size());
        RowCtx ctx{&layout, &buffer, nullptr, outer, nullptr};
        auto passes = [&](std::size_t slot) {
            for (const Expr* c : at_level[slot])
                if (!truthy(eval(*c, &ctx), c->span)) return false;
            return true;
        };
        std::vector<std::size_t> offsets(inputs.size() + 1, 0);
        for (std::size_t i = 0; i < inputs.size(); ++i) offsets[i + 1] = offsets[i] + inputs[i].rel->columns.size();
        std::function<void(std::size_t)> join = [&](std::size_t k) {
            if (k == inputs.size()) {
                rows.push_back(buffer);
                return;
            }
            for (const Row& r : inputs[k].rel->rows) {
                std::copy(r.begin(), r.end(), buffer.begin() + static_cast<std::ptrdiff_t>(offsets[k]));
                if (passes(k + 1)) join(k + 1);
            }
        };
        if (passes(0)) join(0);

        bool aggregate_query = !q.group_by.empty();
        for (const auto& p : q.projections)
            if (!p.star && has_shallow_aggregate(p.expr)) aggregate_query = true;
        if (q.having && has_shallow_aggregate(*q.having)) aggregate_query = true;
        for (const auto& o : q.order_by)
            if (has_shallow_aggregate(o.expr)) aggregate_query = true;

        Relation out;
        std::vector<bool> typed(0);
        for (const auto& p : q.projections) {
            if (p.star) {
                for (const auto& c : layout.cols)
                    if (p.star_qualifier.empty() || iequals(c.source, p.star_qualifier))
                        out.columns.push_back(Column{c.name, c.type});
            } else {
                std::string name = p.alias;
                ScalarType type = ScalarType::Null;
                if (const auto* c = p.expr.as<ColumnExpr>()) {
                    if (name.empty()) name = c->name;
                    int idx = layout.resolve(*c, &p.expr);
                    if (idx >= 0) type = layout.cols[static_cast<std::size_t>(idx)].type;
                }
                out.columns.push_back(Column{name, type});
            }
        }

        std::vector<std::vector<Value>> sort_keys;
        auto project = [&](const RowCtx& rc) {
            Row r;
            for (const auto& p : q.projections) {
                if (p.star) {
                    for (std::size_t i = 0; i < layout.cols.size(); ++i)
                        if (p.star_qualifier.empty() || iequals(layout.cols[i].source, p.star_qualifier))
                            r.push_back(rc.row ? (*rc.row)[i] : Value::null());
                } else {
                    r.push_back(eval(p.expr, &rc));
                }
            }
            if (!q.order_by.empty()) {
                std::vector<Value> keys;
                for (const auto& o : q.order_by) {
                    std::optional<std::size_t> alias_idx;
                    if (const auto* c = o.expr.as<ColumnExpr>(); c && c->qualifier.empty()) {
                        for (std::size_t i = 0; i < q.projections.size() && i < out.columns.size(); ++i)
                            if (!q.projections[i].star && !q.projections[i].alias.empty() &&
                                iequals(q.projections[i].alias, c->name))
                                alias_idx = i;
                    }
                    keys.push_back(alias_idx ? r[*alias_idx] : eval(o.expr, &rc));
                }
                sort_keys.push_back(std::move(keys));
            }
            out.rows.push_back(std::move(r));
        };

        if (aggregate_query) {
            std::vector<std::vector<const Row*>> groups;
            if (q.group_by.empty()) {
                groups.emplace_back();
                for (const Row& r : rows) groups[0].push_back(&r);
            } else {
                std::unordered_map<Row, std::size_t, RowHash> index;
                for (const Row& r : rows) {
                    RowCtx rc{&layout, &r, nullptr, outer, nullptr};
                    Row key;
                    for (const auto& g : q.group_by) key.push_back(eval(g, &rc));
                    auto [it, inserted] = index.try_emplace(std::move(key), groups.size());
                    if (inserted) groups.emplace_back();
                    groups[it->second].push_back(&r);
                }
            }
            for (const auto& g : groups) {
                std::unordered_map<const Expr*, Value> cache;
                RowCtx rc{&layout, g.empty() ? nullptr : g.front(), &g, outer, &cache};
                if (q.having && !truthy(eval(*q.having, &rc), q.having->span)) continue;
                project(rc);
            }
        } else {
            if (q.having) throw Error(ErrorKind::Type, "HAVING without aggregation", q.span);
            for (const Row& r : rows) {
                RowCtx rc{&layout, &r, nullptr, outer, nullptr};
                project(rc);
            }
        }

        if (!q.order_by.empty()) {
            std::vector<std::size_t> idx(out.rows.size());
            for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
            std::stable_sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) {
                for (std::size_t k = 0; k < q.order_by.size(); ++k) {
                    int c = sort_compare(sort_keys[x][k], sort_keys[y][k]);
                    if (c != 0) return q.order_by[k].descending ? c > 0 : c < 0;
                }
                return false;
            });
            std::vector<Row> sorted;
            sorted.reserve(idx.size());
            for (auto i : idx) sorted.push_back(std::move(out.rows[i]));
            out.rows = std::move(sorted);
        }
        if (q.top && out.rows.size() > static_cast<std::size_t>(*q.top))
            out.rows.resize(static_cast<std::size_t>(*q.top));

        for (std::size_t c = 0; c < out.columns.size(); ++c) {
            if (out.columns[c].type != ScalarType::Null) continue;
            for (const auto& r : out.rows) {
                if (!r[c].is_null()) {
                    out.columns[c].type = r[c].type();
                    break;
                }
            }
        }
        return out;
    }

    // ---- statements ----
    Flow exec_block(const Block& b) {
        for (const auto& s : b)
            if (exec(s) == Flow::Return) return Flow::Return;
        return Flow::Normal;
    }

    void tick(std::int64_t& n, Span span) const {
        if (++n > opts_.max_loop_iterations) throw Error(ErrorKind::Runtime, "loop iteration limit exceeded", span);
    }

    Relation& mutable_catalog_table(const std::string& name, Span span) {
        std::string key = lower(name);
        auto it = overlay_.find(key);
        if (it == overlay_.end()) {
            const Relation* base = catalog_.find(key);
            if (!base) throw Error(ErrorKind::Schema, "unknown table " + name, span);
            it = overlay_.emplace(key, std::make_shared<Relation>(*base)).first;
        }
        return *it->second;
    }

    Row typed_row(const std::vector<Value>& values, const std::vector<Column>& cols, Span span) {
        if (values.size() != cols.size())
            throw Error(ErrorKind::Runtime, "INSERT supplies " + std::to_string(values.size()) + " values for " +
                                                std::to_string(cols.size()) + " columns",
                        span);
        Row row;
        for (std::size_t i = 0; i < values.size(); ++i) {
            try {
                row.push_back(coerce(values[i], cols[i].type));
            } catch (const Error& e) {
                throw Error(e.kind(), e.detail() + " (column " + cols[i].name + ")", span);
            }
        }
        return row;
    }

    void exec_dml(const Stmt& s, const DmlStmt& d) {
        Relation& rel = mutable_catalog_table(d.table, s.span);
        if (d.kind == DmlKind::Insert) {
            std::vector<Value> vals;
            for (const auto& v : d.values) vals.push_back(eval(v, nullptr));
            rel.rows.push_back(typed_row(vals, rel.columns, s.span));
            return;
        }
        Layout layout;
        for (const auto& c : rel.columns) {
            layout.cols.push_back(QCol{d.table, c.name, c.type});
            layout.source_of.push_back(0);
        }
        std::vector<Row> kept;
        for (auto& row : rel.rows) {
            RowCtx rc{&layout, &row, nullptr, nullptr, nullptr};
            bool hit = !d.where || truthy(eval(*d.where, &rc), s.span);
            if (!hit) {
                kept.push_back(std::move(row));
                continue;
            }
            if (d.kind == DmlKind::Delete) continue;
            Row updated = row;
            for (const auto& a : d.assignments) {
                auto idx = rel.column_index(a.column);
                if (!idx) throw Error(ErrorKind::Schema, "unknown column " + a.column, s.span);
                updated[*idx] = coerce(eval(a.value, &rc), rel.columns[*idx].type);
            }
            kept.push_back(std::move(updated));
        }
        rel.rows = std::move(kept);
    }

    Flow exec(const Stmt& s) {
        return std::visit(
            [&](const auto& n) -> Flow {
                using T = std::decay_t<decltype(n)>;
                if constexpr (std::is_same_v<T, DeclareStmt>) {
                    Value v;
                    if (n.type.is_table()) {
                        auto rel = std::make_shared<Relation>();
                        rel->columns = n.type.table_columns;
                        v = Value::table(std::move(rel));
                    } else if (n.init) {
                        v = coerce_to(eval(*n.init, nullptr), n.type);
                    }
                    if (frame_->fields) {
                        if (auto it = frame_->fields->find(n.var); it != frame_->fields->end()) {
                            it->second.value = coerce_to(v, it->second.type);
                            return Flow::Normal;
                        }
                    }
                    frame_->locals[n.var] = Slot{std::move(v), n.type};
                } else if constexpr (std::is_same_v<T, AssignStmt>) {
                    assign(n.var, eval(n.value, nullptr), s.span);
                } else if constexpr (std::is_same_v<T, AssignQueryStmt>) {
                    exec_assign_query(s, n);
                } else if constexpr (std::is_same_v<T, IfStmt>) {
                    if (truthy(eval(n.cond, nullptr), s.span)) return exec_block(n.then_block);
                    return exec_block(n.else_block);
                } else if constexpr (std::is_same_v<T, WhileStmt>) {
                    std::int64_t iterations = 0;
                    for (;;) {
                        bool go = n.cond ? truthy(eval(*n.cond, nullptr), s.span) : frame_->fetch_status == 0;
                        if (!go) break;
                        tick(iterations, s.span);
                        if (exec_block(n.body) == Flow::Return) return Flow::Return;
                    }
                } else if constexpr (std::is_same_v<T, ForStmt>) {
                    assign(n.init.var, eval(n.init.value, nullptr), s.span);
                    std::int64_t iterations = 0;
                    while (truthy(eval(n.cond, nullptr), s.span)) {
                        tick(iterations, s.span);
                        if (exec_block(n.body) == Flow::Return) return Flow::Return;
                        assign(n.incr.var, eval(n.incr.value, nullptr), s.span);
                    }
                } else if constexpr (std::is_same_v<T, CursorDeclareStmt>) {
                    std::string key = lower(n.cursor);
                    if (auto it = frame_->cursors.find(key); it != frame_->cursors.end() && it->second.open)
                        throw Error(ErrorKind::Runtime, "cursor " + n.cursor + " declared while open", s.span);
                    CursorState c;
                    c.rows = eval_query(n.query, nullptr).rows;
                    ++stats.cursor_materializations;
                    stats.materialized_rows += static_cast<std::int64_t>(c.rows.size());
                    frame_->cursors[key] = std::move(c);
                } else if constexpr (std::is_same_v<T, CursorOpenStmt>) {
                    cursor(n.cursor, s.span).open = true;
                } else if constexpr (std::is_same_v<T, FetchStmt>) {
                    CursorState& c = cursor(n.cursor, s.span);
                    if (!c.open) throw Error(ErrorKind::Runtime, "FETCH from closed cursor " + n.cursor, s.span);
                    if (c.pos >= c.rows.size()) {
                        frame_->fetch_status = -1;
                        return Flow::Normal;
                    }
                    const Row& row = c.rows[c.pos++];
                    if (row.size() != n.vars.size())
                        throw Error(ErrorKind::Runtime, "FETCH target count differs from cursor arity", s.span);
                    std::vector<ScalarType> types;
                    for (std::size_t i = 0; i < n.vars.size(); ++i) {
                        assign(n.vars[i], row[i], s.span);
                        types.push_back(slot(n.vars[i], s.span).type.scalar);
                    }
                    if (top_level_client()) count_client_row(row, types);
                    frame_->fetch_status = 0;
                } else if constexpr (std::is_same_v<T, CursorCloseStmt>) {
                    cursor(n.cursor, s.span).open = false;
                } else if constexpr (std::is_same_v<T, CursorDeallocateStmt>) {
                    cursor(n.cursor, s.span);
                    frame_->cursors.erase(lower(n.cursor));
                } else if constexpr (std::is_same_v<T, InsertLocalStmt>) {
                    std::vector<Value> vals;
                    for (const auto& v : n.values) vals.push_back(eval(v, nullptr));
                    Slot& t = slot(n.table, s.span);
                    if (!t.type.is_table()) throw Error(ErrorKind::Type, n.table + " is not a table variable", s.span);
                    Row row = typed_row(vals, t.type.table_columns, s.span);
                    if (!t.value.is_table()) {
                        auto rel = std::make_shared<Relation>();
                        rel->columns = t.type.table_columns;
                        t.value = Value::table(std::move(rel));
                    }
                    t.value.mutable_table().rows.push_back(std::move(row));
                } else if constexpr (std::is_same_v<T, ReturnStmt>) {
                    return_value_ = n.value ? eval(*n.value, nullptr) : Value::null();
                    return Flow::Return;
                } else if constexpr (std::is_same_v<T, SkipStmt>) {
                } else if constexpr (std::is_same_v<T, DmlStmt>) {
                    exec_dml(s, n);
                }
                return Flow::Normal;
            },
            s.node);
    }

    CursorState& cursor(const std::string& name, Span span) {
        auto it = frame_->cursors.find(lower(name));
        if (it == frame_->cursors.end()) throw Error(ErrorKind::Runtime, "cursor " + name + " is not declared", span);
        return it->second;
    }

    void exec_assign_query(const Stmt& s, const AssignQueryStmt& n) {
        bool client = top_level_client();
        Relation r = eval_query(n.query, nullptr);
        if (r.rows.empty()) return;
        if (r.rows.size() > 1) throw Error(ErrorKind::Runtime, "assignment query returned more than one row", s.span);
        std::vector<Value> values = r.rows[0];
        if (values.size() == 1 && values[0].is_record() && n.vars.size() == values[0].as_record().values.size())
            values = values[0].as_record().values;
        if (values.size() != n.vars.size())
            throw Error(ErrorKind::Runtime, "assignment query arity differs from target count", s.span);
        std::vector<ScalarType> types;
        for (std::size_t i = 0; i < n.vars.size(); ++i) {
            assign(n.vars[i], values[i], s.span);
            types.push_back(slot(n.vars[i], s.span).type.scalar);
        }
        if (client) count_client_row(values, types);
    }

    const Program* program_;
    const Catalog& catalog_;
    RunOptions opts_;
    Frame* frame_ = nullptr;
    Value return_value_;
    int query_depth_ = 0;
    std::vector<std::pair<std::string, const Relation*>> ctes_;
    std::unordered_map<std::string, std::shared_ptr<Relation>> overlay_;
};

bool multiset_equal(const Relation& a, const Relation& b) {
    if (a.rows.size() != b.rows.size()) return false;
    std::unordered_map<Row, std::int64_t, RowHash> counts;
    for (const auto& r : a.rows) ++counts[r];
    for (const auto& r : b.rows) {
        auto it = counts.find(r);
        if (it == counts.end() || it->second == 0) return false;
        --it->second;
    }
    return true;
}

} // namespace

RunResult interpret_program(const Program& p, const Catalog& catalog, const std::vector<Value>& args,
                            RunOptions options) {
    Machine m(&p, catalog, options);
    return m.run(p, args);
}

Relation eval_query(const QuerySpec& q, const Catalog& catalog, const std::map<std::string, Value>& env,
                    const Program* aggregates_from, ExecStats& stats, RunOptions options) {
    Machine m(aggregates_from, catalog, options);
    Relation r = m.query_with_env(q, env);
    stats += m.stats;
    return r;
}

Outcome run_guarded(const Program& p, const Catalog& catalog, const std::vector<Value>& args, RunOptions options) {
    Outcome o;
    try {
        o.result = interpret_program(p, catalog, args, options);
    } catch (const Error& e) {
        o.error = e.kind();
        o.error_message = e.what();
    } catch (const std::exception& e) {
        o.error = ErrorKind::Runtime;
        o.error_message = std::string("internal: ") + e.what();
    }
    return o;
}

std::vector<std::string> tables_read(const Program& p) {
    std::set<std::string> table_vars;
    walk_stmts(p.body, [&](const Stmt& s) {
        if (const auto* d = s.as<DeclareStmt>(); d && d->type.is_table()) table_vars.insert(d->var);
    });
    std::set<std::string> read;
    auto scan = [&](const Block& b) {
        walk_stmts(b, [&](const Stmt& s) {
            std::vector<std::string> vars;
            if (const auto* c = s.as<CursorDeclareStmt>()) collect_vars(c->query, vars);
            else if (const auto* a = s.as<AssignQueryStmt>()) collect_vars(a->query, vars);
            else if (const auto* i = s.as<InsertLocalStmt>())
                for (const auto& v : i->values) collect_vars(v, vars);
            else if (const auto* x = s.as<AssignStmt>()) collect_vars(x->value, vars);
            else if (const auto* f = s.as<IfStmt>()) collect_vars(f->cond, vars);
            else if (const auto* w = s.as<WhileStmt>(); w && w->cond) collect_vars(*w->cond, vars);
            else if (const auto* r = s.as<ReturnStmt>(); r && r->value) collect_vars(*r->value, vars);
            else if (const auto* d = s.as<DeclareStmt>(); d && d->init) collect_vars(*d->init, vars);
            for (const auto& v : vars)
                if (table_vars.count(v)) read.insert(v);
        });
    };
    scan(p.body);
    for (const auto& a : p.aggregates) {
        scan(a.init_body);
        scan(a.accumulate_body);
    }
    return {read.begin(), read.end()};
}

DifferentialVerdict run_differential(const Program& original, const Program& transformed, const Catalog& catalog,
                                     const std::vector<Value>& args, RunOptions options,
                                     const Catalog* transformed_catalog) {
    DifferentialVerdict v;
    const Catalog& tcat = transformed_catalog ? *transformed_catalog : catalog;
    auto fut = std::async(std::launch::async, [&] { return run_guarded(transformed, tcat, args, options); });
    v.original = run_guarded(original, catalog, args, options);
    v.transformed = fut.get();

    const Outcome& a = v.original;
    const Outcome& b = v.transformed;
    if (a.error || b.error) {
        if (a.error && b.error && *a.error == *b.error) {
            v.equal = true;
            return v;
        }
        v.reason = "error mismatch: original " + (a.error ? a.error_message : std::string("ok")) + "; transformed " +
                   (b.error ? b.error_message : std::string("ok"));
        return v;
    }
    const RunResult& ra = *a.result;
    const RunResult& rb = *b.result;
    if (ra.returned != rb.returned || !(ra.return_value == rb.return_value)) {
        v.reason = "return value differs: " + ra.return_value.to_display() + " vs " + rb.return_value.to_display();
        return v;
    }
    std::set<std::string> names;
    for (const auto& [k, _] : ra.tables) names.insert(k);
    for (const auto& [k, _] : rb.tables) names.insert(k);
    auto ordered = tables_read(original);
    for (const auto& name : names) {
        auto ia = ra.tables.find(name);
        auto ib = rb.tables.find(name);
        if (ia == ra.tables.end() || ib == rb.tables.end()) {
            v.reason = "table " + name + " exists on one side only";
            return v;
        }
        bool seq = std::find(ordered.begin(), ordered.end(), name) != ordered.end();
        bool same = seq ? ia->second.rows == ib->second.rows : multiset_equal(ia->second, ib->second);
        if (!same) {
            v.reason = "table " + name + " differs";
            return v;
        }
    }
    v.equal = true;
    return v;
}

} // namespace aggify
