#include <doctest.h>

#include <json.hpp>

#include "aggify/aggify.hpp"
#include "aggify/engine.hpp"
#include "aggify/frontend.hpp"
#include "../support/support.hpp"

using namespace aggify;
using Names = std::set<std::string>;

namespace {

Names as_set(const std::vector<std::string>& v) { return {v.begin(), v.end()}; }

Names param_names(const AggregateSpec& a) {
    Names out;
    for (const auto& p : a.params) out.insert(p.name.substr(1));
    return out;
}

// A single-cursor routine over t(k, v, s) with the given loop body; the
// text after the loop comes from `tail`.
std::string cursor_routine(const std::string& decls, const std::string& body, const std::string& tail,
                           const std::string& query = "SELECT v FROM t") {
    return "CREATE FUNCTION f(@p INT) RETURNS INT AS BEGIN\n" + decls + "\nDECLARE @v INT;\n" +
           "DECLARE c CURSOR FOR " + query + ";\nOPEN c;\nFETCH NEXT FROM c INTO @v;\n" +
           "WHILE @@FETCH_STATUS = 0\nBEGIN\n" + body + "\nFETCH NEXT FROM c INTO @v;\nEND\n" +
           "CLOSE c;\nDEALLOCATE c;\n" + tail + "\nEND";
}

struct Analysis {
    Program p;
    Cfg cfg;
    DataflowFacts facts;
    std::vector<CursorLoopRegion> regions;
};

// Program is held by value, so rebuild the graph after the move.
std::unique_ptr<Analysis> analyse(const std::string& src) {
    auto a = std::make_unique<Analysis>();
    a->p = parse_source(src, ParseOptions{true});
    a->cfg = build_cfg(a->p);
    a->facts = analyze(a->cfg);
    a->regions = find_cursor_loops(a->p, a->cfg);
    return a;
}

Catalog data() { return load_catalog(testsupport::fixtures() / "data"); }

Catalog small_t() {
    Catalog c;
    Relation t{{{"k", ScalarType::Int}, {"v", ScalarType::Int}, {"s", ScalarType::Varchar}}, {}};
    for (int i = 0; i < 12; ++i)
        t.rows.push_back({Value::integer(i % 4), i % 5 == 0 ? Value::null() : Value::integer(i * 7 % 11),
                          Value::varchar(std::string(1, static_cast<char>('a' + i)))});
    c.add("t", t);
    return c;
}

std::optional<RejectReason> rejection_of(const std::string& src) {
    TransformResult r = transform_program(parse_source(src, ParseOptions{true}));
    REQUIRE(r.loops.size() == 1);
    if (!r.loops[0].rejection) return std::nullopt;
    return r.loops[0].rejection->reason;
}

} // namespace

TEST_CASE("cheapest-supplier routine: computed sets") {
    TransformResult r = transform_program(testsupport::parse_fixture("min_cost_supp.csl"));
    REQUIRE(r.plans.size() == 1);
    const auto& plan = r.plans[0];
    CHECK(as_set(plan.sets.v_f) == Names{"minCost", "lb", "suppName", "isInitialized"});
    CHECK(param_names(plan.aggregate) == Names{"pCost", "sName", "pMinCost", "pLb"});
    CHECK(as_set(plan.sets.v_init) == Names{"minCost", "lb"});
    CHECK(plan.sets.v_term == std::vector<std::string>{"suppName"});
    CHECK(plan.sets.v_carry.empty());
    CHECK(as_set(plan.removed_declarations) == Names{"pCost", "sName"});
    // Query attributes come first in the parameter list.
    CHECK(plan.aggregate.params[0].source == ParamSource::QueryAttribute);
    CHECK(plan.aggregate.params[1].source == ParamSource::QueryAttribute);
    CHECK(plan.aggregate.fields.back().name == "@isInitialized");
}

TEST_CASE("cumulative return routine: computed sets") {
    for (auto naming : {ParamNaming::Prefixed, ParamNaming::Same}) {
        AggifyOptions o;
        o.naming = naming;
        TransformResult r = transform_program(testsupport::parse_fixture("cumulative_roi.csl"), o);
        REQUIRE(r.plans.size() == 1);
        const auto& plan = r.plans[0];
        CHECK(as_set(plan.sets.v_f) == Names{"cumulativeROI", "isInitialized"});
        CHECK(as_set(plan.sets.p_accum) == Names{"monthlyROI", "cumulativeROI"});
        CHECK(plan.sets.v_init == std::vector<std::string>{"cumulativeROI"});
        CHECK(plan.sets.v_term == std::vector<std::string>{"cumulativeROI"});
        Names want = naming == ParamNaming::Same ? Names{"monthlyROI", "cumulativeROI"}
                                                 : Names{"monthlyROI", "pCumulativeROI"};
        CHECK(param_names(plan.aggregate) == want);
        std::string accumulate = print_block(plan.aggregate.accumulate_body);
        CHECK(accumulate.find("@cumulativeROI * (@monthlyROI + 1)") != std::string::npos);
    }
}

TEST_CASE("same naming seeds fields through PARAM references") {
    AggifyOptions o;
    o.naming = ParamNaming::Same;
    TransformResult r = transform_program(testsupport::parse_fixture("min_cost_supp.csl"), o);
    std::string agg = print_aggregate(r.plans[0].aggregate.to_def());
    CHECK(agg.find("SET @minCost = PARAM.@minCost;") != std::string::npos);
    CHECK(agg.find("SET @isInitialized = FALSE;") != std::string::npos);
    CHECK(agg.find("TERMINATE (@suppName);") != std::string::npos);
}

TEST_CASE("a body reading only fetched values has just the init flag as field") {
    auto a = analyse(cursor_routine("DECLARE @o TABLE(x INT);", "IF @v > 0 SKIP;", "RETURN 0;"));
    LoopSets s = compute_sets(a->regions[0], a->p, a->cfg, a->facts);
    CHECK(s.v_f == std::vector<std::string>{"isInitialized"});
    CHECK(s.v_init.empty());
}

TEST_CASE("variables defined in the body before use are not parameters") {
    auto a = analyse(cursor_routine("DECLARE @s INT = 0; DECLARE @tmp INT;", "SET @tmp = @v * 2; SET @s = @s + @tmp;",
                                    "RETURN @s;"));
    LoopSets s = compute_sets(a->regions[0], a->p, a->cfg, a->facts);
    CHECK(as_set(s.p_accum) == Names{"v", "s"});
    CHECK(as_set(s.v_init) == Names{"s"});
    CHECK(s.v_term == std::vector<std::string>{"s"});
}

TEST_CASE("fetch-sourced parameters do not need initialization") {
    auto a = analyse(cursor_routine("DECLARE @last INT;", "SET @last = @v;", "RETURN @last;"));
    LoopSets s = compute_sets(a->regions[0], a->p, a->cfg, a->facts);
    CHECK(s.p_accum == std::vector<std::string>{"v"});
    CHECK(s.v_init.empty());
}

TEST_CASE("two running values read after the loop form a record") {
    TransformResult r = transform_program(testsupport::parse_fixture("two_running_values.csl"));
    REQUIRE(r.plans.size() == 1);
    CHECK(as_set(r.plans[0].sets.v_term) == Names{"lo", "hi", "cnt"});
    CHECK(r.plans[0].result_bindings.size() == 3);
    std::string text = pretty_print(r.program);
    CHECK(text.find("SET (@lo, @hi, @cnt) = (SELECT") != std::string::npos);
}

TEST_CASE("a field assigned on some paths only is carried in") {
    TransformResult r = transform_program(testsupport::parse_fixture("carry_field.csl"));
    REQUIRE(r.plans.size() == 1);
    CHECK(r.plans[0].sets.v_carry == std::vector<std::string>{"flag"});
    CHECK(r.plans[0].sets.v_init.empty());
    Program orig = testsupport::parse_fixture("carry_field.csl");
    Catalog c = data();
    for (int cust : {1, 3, 6, 8, 11}) CHECK(run_differential(orig, r.program, c, {Value::integer(cust)}).equal);
}

TEST_CASE("aggregate with an empty body only runs the init guard") {
    auto a = analyse(cursor_routine("DECLARE @x INT = 5;", "SKIP;", "RETURN @x;"));
    LoopSets s;
    s.v_f = {"x", "isInitialized"};
    s.p_accum = {"x"};
    s.v_init = {"x"};
    s.v_term = {"x"};
    AggregateSpec agg = build_aggregate(a->regions[0], s, a->p, "g", ParamNaming::Prefixed);
    AggregateDef def = agg.to_def();
    REQUIRE(!def.accumulate_body.empty());
    CHECK(def.accumulate_body[0].as<IfStmt>() != nullptr);
    for (std::size_t i = 1; i < def.accumulate_body.size(); ++i) CHECK(def.accumulate_body[i].as<SkipStmt>() != nullptr);
    CHECK(def.terminate == std::vector<std::string>{"@x"});
    CHECK(agg.init_set == std::vector<std::string>{"@x"});
    CHECK(print_expr(agg.init_values[0]) == "@pX");
}

TEST_CASE("the cheapest-supplier loop becomes one aggregate query") {
    TransformResult r = transform_program(testsupport::parse_fixture("min_cost_supp.csl"));
    std::string text = pretty_print(r.program);
    CHECK(text.find("CREATE AGGREGATE minCostSupp_1_agg(@pCost DECIMAL, @sName VARCHAR, @pMinCost DECIMAL, @pLb INT)") !=
          std::string::npos);
    CHECK(text.find("SET (@suppName) = (SELECT minCostSupp_1_agg(ps_supplycost, s_name, @minCost, @lb) AS aggVal "
                    "FROM (SELECT ps_supplycost, s_name FROM partsupp, supplier WHERE ps_partkey = @pkey AND "
                    "ps_suppkey = s_suppkey) AS sub HAVING COUNT(*) > 0);") != std::string::npos);
    CHECK(text.find("DECLARE @pCost") == std::string::npos);
    CHECK(text.find("DECLARE @sName") == std::string::npos);
    CHECK(text.find("CURSOR") == std::string::npos);
    CHECK(text.find("FETCH") == std::string::npos);
    CHECK(parse_source(text) == r.program);
}

TEST_CASE("ordered cursors feed an order-sensitive aggregate") {
    TransformResult r = transform_program(testsupport::parse_fixture("ordered_concat.csl"));
    REQUIRE(r.plans.size() == 1);
    const auto& q = r.plans[0].rewritten_query;
    CHECK(r.plans[0].aggregate.order_sensitive);
    auto agg = q.projections[0].expr.as<AggregateExpr>();
    REQUIRE(agg != nullptr);
    CHECK(agg->order_sensitive());
    REQUIRE(q.from[0].subquery.has_value());
    CHECK((*q.from[0].subquery)->order_by.empty());

    AggifyOptions loose;
    loose.ignore_order = true;
    TransformResult u = transform_program(testsupport::parse_fixture("ordered_concat.csl"), loose);
    CHECK_FALSE(u.plans[0].rewritten_query.projections[0].expr.as<AggregateExpr>()->order_sensitive());
}

TEST_CASE("grouped cursor queries stay intact inside the subquery") {
    TransformResult r = transform_program(testsupport::parse_fixture("group_by_query.csl"));
    REQUIRE(r.plans.size() == 1);
    const QuerySpec& inner = **r.plans[0].rewritten_query.from[0].subquery;
    CHECK(inner.group_by.size() == 1);
    CHECK(print_query(inner).find("COUNT(*) AS suppliers") != std::string::npos);
}

TEST_CASE("nested loops: inner first, then the outer loop") {
    Program p = testsupport::parse_fixture("nested_loops.csl");
    TransformResult r = transform_program(p);
    REQUIRE(r.plans.size() == 2);
    CHECK(r.plans[0].region.cursor == "co");
    CHECK(r.plans[1].region.cursor == "cc");
    // The outer aggregate body holds the inner loop as a scalar query.
    std::string outer = print_block(r.plans[1].aggregate.accumulate_body);
    CHECK(outer.find("topCustomer_1_agg") != std::string::npos);
    CHECK(outer.find("WHILE") == std::string::npos);
    CHECK(pretty_print(r.program).find("WHILE") == std::string::npos);
    Catalog c = data();
    for (int n = 0; n < 5; ++n) CHECK(run_differential(p, r.program, c, {Value::integer(n)}).equal);
}

TEST_CASE("zero cursor loops leave the routine unchanged") {
    Program p = parse_source("CREATE FUNCTION f(@a INT) RETURNS INT AS BEGIN DECLARE @i INT = 0; "
                             "WHILE @i < @a SET @i = @i + 1; RETURN @i; END");
    TransformResult r = transform_program(p);
    CHECK(r.plans.empty());
    CHECK(r.loops.empty());
    CHECK(r.program == p);
}

TEST_CASE("rejections") {
    SUBCASE("persistent DML in the body") {
        TransformResult r = transform_program(testsupport::parse_fixture("persistent_dml.csl"));
        REQUIRE(r.loops.size() == 2);
        REQUIRE(r.loops[0].rejection.has_value());
        CHECK(r.loops[0].rejection->reason == RejectReason::PersistentDml);
        CHECK(r.loops[0].rejection->span.line > 0);
        CHECK(r.loops[1].transformed);
        CHECK(pretty_print(r.program).find("INSERT INTO audit_log") != std::string::npos);
    }
    SUBCASE("update of a catalog table") {
        CHECK(rejection_of(cursor_routine("DECLARE @n INT = 0;", "UPDATE t SET v = 0 WHERE k = @v; SET @n = @n + 1;",
                                          "RETURN @n;")) == RejectReason::PersistentDml);
    }
    SUBCASE("RETURN inside the body") {
        CHECK(rejection_of(cursor_routine("DECLARE @n INT = 0;", "IF @v > 3 RETURN @v; SET @n = @n + 1;",
                                          "RETURN @n;")) == RejectReason::UnsupportedStmt);
    }
    SUBCASE("fetched value read after the loop") {
        CHECK(rejection_of(cursor_routine("DECLARE @n INT = 0;", "SET @n = @n + 1;", "RETURN @n + @v;")) ==
              RejectReason::FetchLiveAtExit);
    }
    SUBCASE("loop result never read") {
        CHECK(rejection_of(cursor_routine("DECLARE @n INT = 0;", "SET @n = @n + 1;", "RETURN 0;")) ==
              RejectReason::PointlessRewrite);
        CHECK(rejection_of(cursor_routine("", "SKIP;", "RETURN 0;")) == RejectReason::PointlessRewrite);
    }
    SUBCASE("star projection") {
        CHECK(rejection_of(cursor_routine("DECLARE @n INT = 0;", "SET @n = @n + @v;", "RETURN @n;",
                                          "SELECT * FROM u")) == RejectReason::UnsupportedStmt);
    }
    SUBCASE("accepted") {
        CHECK_FALSE(rejection_of(cursor_routine("DECLARE @n INT = 0;", "SET @n = @n + @v;", "RETURN @n;")));
    }
}

TEST_CASE("rewrites preserve results over random data") {
    std::vector<std::string> bodies = {
        "IF @v IS NOT NULL SET @n = @n + @v;",
        "IF @v > @p SET @n = @n + 1; ELSE SET @n = @n - 1;",
        "IF @n IS NULL OR @v < @n SET @n = @v;",
        "SET @n = COALESCE(@v, 0) * 2 + @n % 7;",
    };
    Catalog c = small_t();
    for (const auto& body : bodies)
        for (const char* q : {"SELECT v FROM t", "SELECT v FROM t WHERE k = @p", "SELECT v FROM t ORDER BY s DESC"}) {
            std::string src = cursor_routine("DECLARE @n INT = 0;", body, "RETURN @n;", q);
            Program p = parse_source(src);
            TransformResult r = transform_program(p);
            CAPTURE(src);
            REQUIRE(r.plans.size() == 1);
            for (int arg = -1; arg < 6; ++arg) CHECK(run_differential(p, r.program, c, {Value::integer(arg)}).equal);
        }
}

TEST_CASE("applicability counts") {
    ApplicabilityCounts n = applicability(testsupport::parse_fixture("persistent_dml.csl"));
    CHECK(n.while_loops == 2);
    CHECK(n.cursor_loops == 2);
    CHECK(n.aggifyable == 1);
    REQUIRE(n.rejected.size() == 1);
    CHECK(n.rejected[0].rejection->reason == RejectReason::PersistentDml);

    ApplicabilityCounts f = applicability(testsupport::parse_fixture("for_sum.csl"));
    CHECK(f.while_loops == 1);
    CHECK(f.cursor_loops == 0);
}

TEST_CASE("JSON report lists sets and verdicts") {
    TransformResult r = transform_program(testsupport::parse_fixture("persistent_dml.csl"));
    auto j = nlohmann::json::parse(transform_report_json(r));
    CHECK(j["routine"] == "logAndCount");
    REQUIRE(j["loops"].size() == 2);
    CHECK(j["loops"][0]["status"] == "rejected");
    CHECK(j["loops"][0]["reason"] == "persistent-dml");
    CHECK(j["loops"][1]["status"] == "transformed");
    CHECK(j["loops"][1]["V_term"] == nlohmann::json::array({"n"}));
    CHECK(j["loops"][1].contains("P_accum"));
    CHECK(j["loops"][1].contains("V_F"));
}
