#include "aggify/aggify.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <set>

#include <json.hpp>

#include "aggify/enhance.hpp"

namespace aggify {

namespace {

std::string lower(std::string s) {
    for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

std::string bare(const std::string& v) { return !v.empty() && v[0] == '@' ? v.substr(1) : v; }

std::vector<std::string> bare_all(const std::vector<std::string>& vs) {
    std::vector<std::string> out;
    for (const auto& v : vs) out.push_back(bare(v));
    return out;
}

bool has(const std::vector<std::string>& vs, const std::string& v) { return std::find(vs.begin(), vs.end(), v) != vs.end(); }

void push_unique(std::vector<std::string>& vs, const std::string& v) {
    if (!has(vs, v)) vs.push_back(v);
}

bool is_cursor_stmt(const Stmt& s) {
    return s.as<CursorDeclareStmt>() || s.as<CursorOpenStmt>() || s.as<FetchStmt>() || s.as<CursorCloseStmt>() ||
           s.as<CursorDeallocateStmt>() || (s.as<WhileStmt>() && s.as<WhileStmt>()->is_fetch_loop());
}

std::string cursor_of(const Stmt& s) {
    if (const auto* x = s.as<CursorDeclareStmt>()) return x->cursor;
    if (const auto* x = s.as<CursorOpenStmt>()) return x->cursor;
    if (const auto* x = s.as<FetchStmt>()) return x->cursor;
    if (const auto* x = s.as<CursorCloseStmt>()) return x->cursor;
    if (const auto* x = s.as<CursorDeallocateStmt>()) return x->cursor;
    if (const auto* x = s.as<WhileStmt>()) return x->fetch_cursor;
    return {};
}

Block delta_of(const Program& p, const CursorLoopRegion& r) {
    const Block& blk = block_at(p.body, r.block);
    const auto& loop = *blk[static_cast<std::size_t>(r.while_index)].as<WhileStmt>();
    return Block(loop.body.begin(), loop.body.end() - 1);
}

/// Variables referenced by statements other than their own declaration.
std::set<std::string> non_declaration_refs(const Block& b) {
    std::set<std::string> out;
    walk_stmts(b, [&](const Stmt& s) {
        if (const auto* d = s.as<DeclareStmt>()) {
            if (d->init)
                for (const auto& v : vars_of(*d->init)) out.insert(v);
            return;
        }
        Block one{s};
        for (Block* child : child_blocks(one[0])) child->clear();
        for (const auto& v : referenced_vars(one)) out.insert(v);
    });
    return out;
}

std::string capitalized(const std::string& name) {
    std::string out = name;
    if (!out.empty()) out[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(out[0])));
    return out;
}

struct LoopKey {
    Span span;
    std::string cursor;
    bool matches(const CursorLoopRegion& r) const { return span.same_position(r.span) && cursor == lower(r.cursor); }
};

LoopKey key_of(const CursorLoopRegion& r) { return LoopKey{r.span, lower(r.cursor)}; }

Rejection reject(RejectReason reason, std::string detail, Span span) { return Rejection{reason, std::move(detail), span}; }

std::string initialized_name(const Program& p) {
    std::set<std::string> taken;
    for (const auto& v : referenced_vars(p.body)) taken.insert(lower(v));
    for (const auto& prm : p.params) taken.insert(lower(prm.name));
    std::string name = "@isInitialized";
    for (int n = 2; taken.count(lower(name)); ++n) name = "@isInitialized" + std::to_string(n);
    return name;
}

} // namespace

std::string_view to_string(RejectReason r) {
    switch (r) {
    case RejectReason::PersistentDml: return "persistent-dml";
    case RejectReason::UnsupportedStmt: return "unsupported-stmt";
    case RejectReason::PointlessRewrite: return "pointless-rewrite";
    case RejectReason::FetchLiveAtExit: return "fetch-live-at-exit";
    }
    return "?";
}

LoopSets compute_sets(const CursorLoopRegion& region, const Program& p, const Cfg& cfg, const DataflowFacts& facts) {
    LoopSets s;
    std::set<int> in_loop(region.loop_nodes.begin(), region.loop_nodes.end());
    std::vector<std::string> v_delta, used, declared;
    for (int n : region.body_nodes) {
        const CfgNode& node = cfg.node(n);
        for (const auto& u : node.uses) {
            push_unique(v_delta, u);
            push_unique(used, u);
        }
        for (const auto& d : node.defs) push_unique(v_delta, d.var);
        if (node.stmt && node.stmt->as<DeclareStmt>()) push_unique(declared, node.stmt->as<DeclareStmt>()->var);
    }
    const auto& fetch = region.fetch_vars;

    std::vector<std::string> v_local;
    for (const auto& v : declared)
        if (!facts.live_at_entry(region.header_node, v)) v_local.push_back(v);

    auto order = declaration_order(p);
    auto rank = [&](const std::string& v) {
        auto it = std::find(order.begin(), order.end(), v);
        return static_cast<std::size_t>(it - order.begin());
    };
    std::vector<std::string> v_f;
    for (const auto& v : v_delta)
        if (!has(fetch, v) && !has(v_local, v)) v_f.push_back(v);
    std::stable_sort(v_f.begin(), v_f.end(), [&](const auto& a, const auto& b) { return rank(a) < rank(b); });

    // R(v): some use in the body is reached by a definition made outside
    // the loop.
    auto reached_from_outside = [&](const std::string& v) {
        for (int n : region.body_nodes) {
            if (!has(cfg.node(n).uses, v)) continue;
            for (int d : facts.reaching(n, v)) {
                const DefSite& site = facts.def(d);
                if (site.origin != DefOrigin::Synthetic && !in_loop.count(site.node)) return true;
            }
        }
        return false;
    };
    std::vector<std::string> p_accum;
    for (const auto& v : fetch)
        if (has(used, v) && reached_from_outside(v)) push_unique(p_accum, v);
    for (const auto& v : used)
        if (!has(fetch, v) && reached_from_outside(v)) push_unique(p_accum, v);

    // A fetched variable the body overwrites without reading the fetched value
    // first still needs storage inside the aggregate.
    std::vector<std::string> defined;
    for (int n : region.body_nodes)
        for (const auto& d : cfg.node(n).defs) push_unique(defined, d.var);
    bool extra = false;
    for (const auto& v : fetch)
        if (has(defined, v) && !has(p_accum, v) && !has(v_local, v)) {
            v_f.push_back(v);
            extra = true;
        }
    if (extra) std::stable_sort(v_f.begin(), v_f.end(), [&](const auto& a, const auto& b) { return rank(a) < rank(b); });

    std::vector<std::string> v_init;
    for (const auto& v : p_accum)
        if (!has(fetch, v)) v_init.push_back(v);

    std::vector<std::string> v_term;
    if (region.exit_node >= 0)
        for (const auto& v : v_f)
            if (facts.live_at_entry(region.exit_node, v)) v_term.push_back(v);

    std::vector<std::string> v_carry;
    for (const auto& v : v_term) {
        if (has(v_init, v)) continue;
        for (int d : facts.reaching(region.header_node, v)) {
            const DefSite& site = facts.def(d);
            if (site.origin != DefOrigin::Synthetic && !site.null_init && !in_loop.count(site.node)) {
                v_carry.push_back(v);
                break;
            }
        }
    }

    s.v_delta = bare_all(v_delta);
    s.v_fetch = bare_all(fetch);
    s.v_local = bare_all(v_local);
    s.v_f = bare_all(v_f);
    s.v_f.push_back(bare(initialized_name(p)));
    s.p_accum = bare_all(p_accum);
    s.v_init = bare_all(v_init);
    s.v_carry = bare_all(v_carry);
    s.v_term = bare_all(v_term);
    return s;
}

std::optional<Rejection> check_applicability(const CursorLoopRegion& region, const Program& p, const Cfg& cfg,
                                             const DataflowFacts& facts) {
    const Block& blk = block_at(p.body, region.block);
    Block delta = delta_of(p, region);

    std::optional<Rejection> found;
    walk_stmts(delta, [&](const Stmt& s) {
        if (!found && s.as<DmlStmt>())
            found = reject(RejectReason::PersistentDml,
                           "loop body modifies persistent table " + s.as<DmlStmt>()->table, s.span);
    });
    if (found) return found;
    walk_stmts(delta, [&](const Stmt& s) {
        if (found) return;
        if (s.as<ReturnStmt>()) found = reject(RejectReason::UnsupportedStmt, "RETURN inside the loop body", s.span);
        else if (is_cursor_stmt(s))
            found = reject(RejectReason::UnsupportedStmt, "cursor " + cursor_of(s) + " is used inside the loop body",
                           s.span);
    });
    if (found) return found;

    for (const auto& item : region.query.projections)
        if (item.star) return reject(RejectReason::UnsupportedStmt, "cursor query projects *", region.span);
    std::set<std::string> distinct(region.fetch_vars.begin(), region.fetch_vars.end());
    if (distinct.size() != region.fetch_vars.size())
        return reject(RejectReason::UnsupportedStmt, "FETCH names a variable twice", region.span);

    auto q_inputs = vars_of(region.query);
    for (int j = region.declare_index + 1; j < region.while_index; ++j) {
        if (j == region.open_index || j == region.priming_fetch_index) continue;
        const Stmt& s = blk[static_cast<std::size_t>(j)];
        if (j > region.priming_fetch_index)
            return reject(RejectReason::UnsupportedStmt, "statement between the priming FETCH and the loop", s.span);
        bool dml = false;
        walk_stmts(Block{s}, [&](const Stmt& x) { dml = dml || x.as<DmlStmt>(); });
        if (dml) return reject(RejectReason::UnsupportedStmt, "DML between the cursor declaration and its loop", s.span);
        for (const auto& w : written_vars(Block{s}))
            if (has(q_inputs, w))
                return reject(RejectReason::UnsupportedStmt,
                              "cursor query input " + w + " changes before the loop starts", s.span);
    }

    int uses = 0;
    walk_stmts(p.body, [&](const Stmt& s) {
        if (is_cursor_stmt(s) && lower(cursor_of(s)) == lower(region.cursor)) ++uses;
    });
    int expected = 5 + (region.close_index >= 0) + (region.deallocate_index >= 0);
    if (uses != expected)
        return reject(RejectReason::UnsupportedStmt, "cursor " + region.cursor + " is used outside its loop", region.span);

    if (region.exit_node >= 0)
        for (const auto& v : region.fetch_vars)
            if (facts.live_at_entry(region.exit_node, v))
                return reject(RejectReason::FetchLiveAtExit, "fetched variable " + v + " is read after the loop",
                              region.span);

    if (compute_sets(region, p, cfg, facts).v_term.empty())
        return reject(RejectReason::PointlessRewrite, "no variable written by the loop is read after it", region.span);
    return std::nullopt;
}

AggregateDef AggregateSpec::to_def() const {
    AggregateDef d;
    d.name = name;
    for (const auto& prm : params) d.params.push_back(Param{prm.name, prm.type, std::nullopt});
    d.fields = fields;
    const std::string& flag = fields.back().name;
    d.init_body.push_back(make_stmt(AssignStmt{flag, make_const(Value::boolean(false))}));

    Block guard;
    for (std::size_t i = 0; i < init_set.size(); ++i) guard.push_back(make_stmt(AssignStmt{init_set[i], init_values[i]}));
    guard.push_back(make_stmt(AssignStmt{flag, make_const(Value::boolean(true))}));
    d.accumulate_body.push_back(make_stmt(IfStmt{make_unary(UnaryOp::Not, make_var(flag)), std::move(guard), {}}));
    d.accumulate_body.insert(d.accumulate_body.end(), accumulate_body.begin(), accumulate_body.end());
    d.terminate = terminate;
    return d;
}

AggregateSpec build_aggregate(const CursorLoopRegion& region, const LoopSets& sets, const Program& p,
                              const std::string& name, ParamNaming naming) {
    AggregateSpec a;
    a.name = name;
    auto types = declared_types(p);
    auto type_of = [&](const std::string& var) {
        auto it = types.find(var);
        return it == types.end() ? TypeRef::of(ScalarType::Int) : it->second;
    };
    for (std::size_t i = 0; i + 1 < sets.v_f.size(); ++i) {
        std::string var = "@" + sets.v_f[i];
        a.fields.push_back(Param{var, type_of(var), std::nullopt});
    }
    a.fields.push_back(Param{"@" + sets.v_f.back(), TypeRef::of(ScalarType::Bool), std::nullopt});

    std::set<std::string> taken;
    for (const auto& v : referenced_vars(p.body)) taken.insert(lower(v));
    for (const auto& prm : p.params) taken.insert(lower(prm.name));
    for (const auto& f : a.fields) taken.insert(lower(f.name));

    std::vector<std::string> incoming = sets.p_accum;
    for (const auto& v : sets.v_carry) push_unique(incoming, v);
    for (const auto& b : incoming) {
        std::string var = "@" + b;
        AccumParam prm;
        prm.var = var;
        prm.type = type_of(var);
        auto fetch_it = std::find(region.fetch_vars.begin(), region.fetch_vars.end(), var);
        if (fetch_it != region.fetch_vars.end()) {
            prm.source = ParamSource::QueryAttribute;
            prm.column = static_cast<int>(fetch_it - region.fetch_vars.begin());
            prm.name = var;
        } else if (naming == ParamNaming::Same) {
            prm.name = var;
        } else {
            std::string base = "@p" + capitalized(b);
            prm.name = base;
            for (int n = 2; taken.count(lower(prm.name)); ++n) prm.name = base + std::to_string(n);
            taken.insert(lower(prm.name));
        }
        a.params.push_back(prm);
    }
    for (const auto& prm : a.params) {
        if (prm.source != ParamSource::OuterVariable) continue;
        a.init_set.push_back(prm.var);
        a.init_values.push_back(naming == ParamNaming::Same ? make_param_ref(prm.name) : make_var(prm.name));
    }
    a.accumulate_body = delta_of(p, region);
    for (const auto& v : sets.v_term) a.terminate.push_back("@" + v);
    a.order_sensitive = !region.query.order_by.empty();
    return a;
}

QuerySpec rewrite_query(const CursorLoopRegion& region, const AggregateSpec& agg, bool ignore_order) {
    QuerySpec inner = region.query;
    const std::size_t n = region.fetch_vars.size();
    std::vector<OrderItem> within;
    if (!inner.order_by.empty()) {
        if (!ignore_order) {
            for (std::size_t k = 0; k < inner.order_by.size(); ++k) {
                Expr key = inner.order_by[k].expr;
                if (const auto* c = key.as<ColumnExpr>(); c && c->qualifier.empty()) {
                    for (const auto& item : inner.projections)
                        if (!item.alias.empty() && lower(item.alias) == lower(c->name)) {
                            key = item.expr;
                            break;
                        }
                }
                std::string alias = "sort_key_" + std::to_string(k + 1);
                inner.projections.push_back(SelectItem{std::move(key), alias, false, ""});
                within.push_back(OrderItem{make_column("", alias), inner.order_by[k].descending});
            }
        }
        // TOP needs its ORDER BY to pick the same rows.
        if (!inner.top) inner.order_by.clear();
    }

    std::vector<std::string> names;
    std::set<std::string> seen;
    bool named = true;
    for (std::size_t j = 0; j < n && j < inner.projections.size(); ++j) {
        const auto& item = inner.projections[j];
        std::string name = item.alias;
        if (name.empty())
            if (const auto* c = item.expr.as<ColumnExpr>()) name = c->name;
        if (name.empty() || !seen.insert(lower(name)).second || lower(name).rfind("sort_key_", 0) == 0) named = false;
        names.push_back(name);
    }
    std::vector<std::string> derived;
    if (!named) {
        names.clear();
        for (std::size_t j = 0; j < n; ++j) names.push_back("col" + std::to_string(j + 1));
        derived = names;
        for (std::size_t k = 0; k < within.size(); ++k) derived.push_back("sort_key_" + std::to_string(k + 1));
    }

    AggregateExpr call;
    call.name = agg.name;
    for (const auto& prm : agg.params) {
        if (prm.source == ParamSource::QueryAttribute)
            call.args.push_back(make_column("", names[static_cast<std::size_t>(prm.column)]));
        else
            call.args.push_back(make_var(prm.var));
    }
    call.within_order = std::move(within);

    QuerySpec out;
    out.projections.push_back(SelectItem{Expr{std::move(call), {}}, "aggVal", false, ""});
    out.from.push_back(FromItem{"", Box<QuerySpec>(std::move(inner)), "sub", std::move(derived)});
    // No rows: the loop never ran, so the targets keep their values.
    out.having = make_binary(BinaryOp::Gt, Expr{AggregateExpr{"COUNT", {}, true, {}}, {}},
                             make_const(Value::integer(0)));
    return out;
}

TransformResult transform_program(const Program& p, AggifyOptions options) {
    TransformResult r;
    r.program = p;
    if (options.convert_for) r.for_loops_converted = convert_for_loops(r.program, &r.notes);

    std::vector<LoopKey> rejected, moved;
    std::map<std::string, std::vector<std::string>> hoisted;  // by key text
    auto key_text = [](const LoopKey& k) { return to_string(k.span) + "/" + k.cursor; };
    int counter = 0;
    for (;;) {
        Cfg cfg = build_cfg(r.program);
        auto regions = find_cursor_loops(r.program, cfg);
        DataflowFacts facts = analyze(cfg);
        const CursorLoopRegion* next = nullptr;
        for (const auto& reg : regions) {
            if (std::none_of(rejected.begin(), rejected.end(), [&](const LoopKey& k) { return k.matches(reg); })) {
                next = &reg;
                break;
            }
        }
        if (!next) break;
        LoopKey key = key_of(*next);

        auto rejection = check_applicability(*next, r.program, cfg, facts);
        if (rejection) {
            rejected.push_back(key);
            r.loops.push_back(LoopReport{next->cursor, next->span, false, rejection, ""});
            continue;
        }
        if (options.enable_motion &&
            std::none_of(moved.begin(), moved.end(), [&](const LoopKey& k) { return k.matches(*next); })) {
            moved.push_back(key);
            auto added = acyclic_code_motion(r.program, *next);
            if (!added.empty()) {
                hoisted[key_text(key)] = added;
                continue;
            }
        }

        RewritePlan plan;
        plan.region = *next;
        plan.sets = compute_sets(*next, r.program, cfg, facts);
        std::string name;
        do {
            name = r.program.name + "_" + std::to_string(++counter) + "_agg";
        } while (std::any_of(r.program.aggregates.begin(), r.program.aggregates.end(),
                             [&](const AggregateDef& a) { return lower(a.name) == lower(name); }));
        plan.aggregate = build_aggregate(*next, plan.sets, r.program, name, options.naming);
        plan.rewritten_query = rewrite_query(*next, plan.aggregate, options.ignore_order);
        plan.result_bindings = plan.aggregate.terminate;
        plan.hoisted = hoisted[key_text(key)];

        Block& blk = block_at(r.program.body, next->block);
        Span span = blk[static_cast<std::size_t>(next->while_index)].span;
        blk[static_cast<std::size_t>(next->while_index)] =
            make_stmt(AssignQueryStmt{plan.result_bindings, plan.rewritten_query}, span);
        std::vector<int> drop{next->declare_index, next->open_index, next->priming_fetch_index, next->close_index,
                              next->deallocate_index};
        std::sort(drop.rbegin(), drop.rend());
        for (int i : drop)
            if (i >= 0) blk.erase(blk.begin() + i);
        r.program.aggregates.push_back(plan.aggregate.to_def());

        std::vector<std::string> candidates;
        for (const auto& v : plan.sets.v_fetch) push_unique(candidates, "@" + v);
        for (const auto& v : plan.sets.v_delta) push_unique(candidates, "@" + v);
        auto still_used = non_declaration_refs(r.program.body);
        for (const auto& v : candidates) {
            if (still_used.count(v)) continue;
            bool removed = false;
            std::function<void(Block&)> prune = [&](Block& b) {
                for (std::size_t i = 0; i < b.size();) {
                    const auto* d = b[i].as<DeclareStmt>();
                    if (d && d->var == v && (!d->init || d->init->as<ConstExpr>())) {
                        b.erase(b.begin() + static_cast<std::ptrdiff_t>(i));
                        removed = true;
                        continue;
                    }
                    for (Block* child : child_blocks(b[i])) prune(*child);
                    ++i;
                }
            };
            prune(r.program.body);
            if (removed) plan.removed_declarations.push_back(bare(v));
        }

        r.loops.push_back(LoopReport{plan.region.cursor, plan.region.span, true, std::nullopt, name});
        r.plans.push_back(std::move(plan));
    }
    return r;
}

ApplicabilityCounts applicability(const Program& p) {
    ApplicabilityCounts c;
    walk_stmts(p.body, [&](const Stmt& s) {
        if (const auto* w = s.as<WhileStmt>()) {
            ++c.while_loops;
            if (w->is_fetch_loop()) ++c.cursor_loops;
        } else if (s.as<ForStmt>()) {
            ++c.while_loops;
        }
    });
    for (const auto& l : transform_program(p).loops) {
        if (l.transformed)
            ++c.aggifyable;
        else
            c.rejected.push_back(l);
    }
    return c;
}

std::string transform_report_json(const TransformResult& r) {
    using nlohmann::ordered_json;
    ordered_json root;
    root["routine"] = r.program.name;
    root["for_loops_converted"] = r.for_loops_converted;
    ordered_json loops = ordered_json::array();
    for (const auto& l : r.loops) {
        ordered_json j;
        j["cursor"] = l.cursor;
        j["span"] = to_string(l.span);
        if (!l.transformed) {
            j["status"] = "rejected";
            j["reason"] = std::string(to_string(l.rejection->reason));
            j["detail"] = l.rejection->detail;
            j["at"] = to_string(l.rejection->span);
            loops.push_back(j);
            continue;
        }
        const RewritePlan* plan = nullptr;
        for (const auto& p : r.plans)
            if (p.aggregate.name == l.aggregate) plan = &p;
        j["status"] = "transformed";
        j["aggregate"] = l.aggregate;
        const LoopSets& s = plan->sets;
        j["V_delta"] = s.v_delta;
        j["V_fetch"] = s.v_fetch;
        j["V_local"] = s.v_local;
        j["V_F"] = s.v_f;
        j["P_accum"] = s.p_accum;
        ordered_json params = ordered_json::array();
        for (const auto& prm : plan->aggregate.params) params.push_back(bare(prm.name));
        j["P_accum_params"] = params;
        j["V_init"] = s.v_init;
        j["V_carry"] = s.v_carry;
        j["V_term"] = s.v_term;
        j["order_sensitive"] = plan->aggregate.order_sensitive;
        j["hoisted"] = plan->hoisted;
        j["removed_declarations"] = plan->removed_declarations;
        loops.push_back(j);
    }
    root["loops"] = loops;
    root["notes"] = r.notes;
    return root.dump(2);
}

} // namespace aggify
