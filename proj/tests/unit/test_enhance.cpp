#include <doctest.h>

#include "aggify/aggify.hpp"
#include "aggify/engine.hpp"
#include "aggify/enhance.hpp"
#include "aggify/frontend.hpp"
#include "../support/support.hpp"

using namespace aggify;

namespace {

Value I(std::int64_t v) { return Value::integer(v); }

Catalog data() { return load_catalog(testsupport::fixtures() / "data"); }

std::vector<CursorLoopRegion> regions_of(const Program& p) { return find_cursor_loops(p, build_cfg(p)); }

const ForStmt& first_for(const Program& p) {
    for (const auto& s : p.body)
        if (auto f = s.as<ForStmt>()) return *f;
    FAIL("no FOR statement");
    throw 0;
}

Program for_routine(const std::string& header, const std::string& body = "SET @s = @s + @i;",
                    const std::string& tail = "RETURN @s;") {
    return parse_source("CREATE FUNCTION f(@n INT, @m INT, @step INT) RETURNS INT AS BEGIN DECLARE @s INT = 0; "
                        "DECLARE @i INT; DECLARE @j INT = 0; DECLARE @d DECIMAL = 1; FOR (" +
                        header + ") BEGIN " + body + " END " + tail + " END");
}

ErrorKind error_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.kind();
    }
    FAIL("no error raised");
    return ErrorKind::Usage;
}

} // namespace

TEST_CASE("the lower-bound test moves into the cursor query") {
    Program p = testsupport::parse_fixture("min_cost_supp.csl");
    auto regions = regions_of(p);
    auto cands = motion_candidates(regions[0], p);
    REQUIRE(cands.size() == 1);
    CHECK(print_expr(*cands[0].expr) == "@pCost > @lb");
    CHECK(cands[0].type == ScalarType::Bool);
    CHECK(cands[0].reads == std::set<std::string>{"@pCost", "@lb"});

    auto added = acyclic_code_motion(p, regions[0]);
    CHECK(added == std::vector<std::string>{"boolVal"});
    std::string text = pretty_print(p);
    CHECK(text.find("ps_supplycost > @lb AS boolVal") != std::string::npos);
    CHECK(text.find("IF @pCost < @minCost AND @boolVal") != std::string::npos);
    CHECK(text.find("INTO @pCost, @sName, @boolVal;") != std::string::npos);
    CHECK(parse_source(text) == p);
}

TEST_CASE("motion preserves results and drops the bound from the aggregate") {
    Program p = testsupport::parse_fixture("min_cost_supp.csl");
    AggifyOptions o;
    o.enable_motion = true;
    TransformResult r = transform_program(p, o);
    REQUIRE(r.plans.size() == 1);
    CHECK(r.plans[0].hoisted == std::vector<std::string>{"boolVal"});
    for (const auto& prm : r.plans[0].aggregate.params) CHECK(prm.var != "@lb");
    Catalog c = data();
    for (int part : {1, 2, 4, 31, 99})
        for (int lb : {-1, 40}) CHECK(run_differential(p, r.program, c, {I(part), I(lb)}).equal);
}

TEST_CASE("expressions touching loop-written values stay put") {
    const char* src = R"(
CREATE FUNCTION f(@a INT) RETURNS INT AS
BEGIN
    DECLARE @s INT = 0;
    DECLARE @k INT;
    DECLARE c CURSOR FOR SELECT o_custkey FROM orders;
    OPEN c;
    FETCH NEXT FROM c INTO @k;
    WHILE @@FETCH_STATUS = 0
    BEGIN
        IF @s * 2 < @a SET @s = @s + @k;
        FETCH NEXT FROM c INTO @k;
    END
    CLOSE c;
    DEALLOCATE c;
    RETURN @s;
END)";
    Program p = parse_source(src);
    auto regions = regions_of(p);
    CHECK(motion_candidates(regions[0], p).empty());
    Program before = p;
    CHECK(acyclic_code_motion(p, regions[0]).empty());
    CHECK(p == before);
}

TEST_CASE("a factor reading only the fetched value is hoisted") {
    Program p = testsupport::parse_fixture("cumulative_roi.csl");
    auto cands = motion_candidates(regions_of(p)[0], p);
    REQUIRE(cands.size() == 1);
    CHECK(print_expr(*cands[0].expr) == "@monthlyROI + 1");
}

TEST_CASE("loop-invariant arithmetic is hoisted and results agree") {
    const char* src = R"(
CREATE FUNCTION f(@a INT) RETURNS INT AS
BEGIN
    DECLARE @s INT = 0;
    DECLARE @k INT;
    DECLARE c CURSOR FOR SELECT o_custkey FROM orders;
    OPEN c;
    FETCH NEXT FROM c INTO @k;
    WHILE @@FETCH_STATUS = 0
    BEGIN
        SET @s = @s + @a * 2;
        FETCH NEXT FROM c INTO @k;
    END
    CLOSE c;
    DEALLOCATE c;
    RETURN @s;
END)";
    Program p = parse_source(src);
    auto cands = motion_candidates(regions_of(p)[0], p);
    REQUIRE(cands.size() == 1);
    CHECK(print_expr(*cands[0].expr) == "@a * 2");
    CHECK(cands[0].type == ScalarType::Int);

    AggifyOptions o;
    o.enable_motion = true;
    TransformResult r = transform_program(p, o);
    CHECK(r.plans[0].hoisted == std::vector<std::string>{"hoistVal"});
    Catalog c = data();
    for (int a : {0, 3, -7}) CHECK(run_differential(p, r.program, c, {I(a)}).equal);
}

TEST_CASE("division, subqueries and parameter-free constants are not hoisted") {
    const char* src = R"(
CREATE FUNCTION f(@a INT) RETURNS INT AS
BEGIN
    DECLARE @s INT = 0;
    DECLARE @k INT;
    DECLARE c CURSOR FOR SELECT o_custkey FROM orders;
    OPEN c;
    FETCH NEXT FROM c INTO @k;
    WHILE @@FETCH_STATUS = 0
    BEGIN
        SET @s = @s + 100 / @a + (1 + 2) + (SELECT COUNT(*) FROM nation WHERE n_nationkey = @a);
        FETCH NEXT FROM c INTO @k;
    END
    CLOSE c;
    DEALLOCATE c;
    RETURN @s;
END)";
    Program p = parse_source(src);
    CHECK(motion_candidates(regions_of(p)[0], p).empty());
}

TEST_CASE("iteration space of a counting loop") {
    Program p = testsupport::parse_fixture("for_sum.csl");
    QuerySpec q = for_iteration_query(first_for(p));
    CHECK(print_query(q) ==
          "WITH iter(i) AS (SELECT 0 AS i UNION ALL SELECT i + 1 AS i FROM iter WHERE i <= 100) "
          "SELECT i FROM iter WHERE i <= 100");
    ExecStats stats;
    Relation r = eval_query(q, Catalog{}, {}, nullptr, stats);
    REQUIRE(r.rows.size() == 101);
    CHECK(r.rows.front()[0] == I(0));
    CHECK(r.rows.back()[0] == I(100));
}

TEST_CASE("counting loop sums to 5050 through the rewritten form") {
    Program p = testsupport::parse_fixture("for_sum.csl");
    AggifyOptions o;
    o.convert_for = true;
    TransformResult r = transform_program(p, o);
    CHECK(r.for_loops_converted == 1);
    REQUIRE(r.plans.size() == 1);
    std::string text = pretty_print(r.program);
    CHECK(text.find("FOR") == std::string::npos);
    CHECK(text.find("WHILE") == std::string::npos);
    RunResult res = interpret_program(r.program, Catalog{}, {});
    CHECK(res.return_value == I(5050));
    CHECK(res.stats.cursor_materializations == 0);
}

TEST_CASE("bounds only known at run time") {
    Program p = testsupport::parse_fixture("for_runtime_bounds.csl");
    QuerySpec q = for_iteration_query(first_for(p));
    std::string text = print_query(q);
    CHECK(text.find("SELECT @lo AS k") != std::string::npos);
    CHECK(text.find("k + @step") != std::string::npos);
    CHECK(text.find("k < @hi") != std::string::npos);

    AggifyOptions o;
    o.convert_for = true;
    TransformResult r = transform_program(p, o);
    CHECK(r.for_loops_converted == 1);
    for (auto args : std::vector<std::vector<Value>>{{I(0), I(10), I(1)}, {I(3), I(40), I(7)}, {I(5), I(4), I(1)},
                                                     {I(-3), I(3), I(2)}})
        CHECK(run_differential(p, r.program, Catalog{}, args).equal);
}

TEST_CASE("induction variable read after the loop gets its exit value") {
    Program p = for_routine("@i = @n; @i < @m; @i = @i + @step", "SET @s = @s + 1;", "RETURN @s * 1000 + @i;");
    Program q = p;
    CHECK(convert_for_loops(q) == 1);
    CHECK(pretty_print(q).find("SET @i = (WITH iter(i) AS") != std::string::npos);
    for (auto args : std::vector<std::vector<Value>>{{I(0), I(10), I(3)}, {I(4), I(4), I(1)}, {I(9), I(2), I(1)},
                                                     {I(10), I(0), I(-2)}})
        CHECK(run_differential(p, q, Catalog{}, args).equal);
}

TEST_CASE("random counting loops agree with their iteration space") {
    std::mt19937_64 rng(3);
    std::uniform_int_distribution<int> bound(-20, 20), step(1, 5);
    Program p = for_routine("@i = @n; @i <= @m; @i = @i + @step");
    AggifyOptions o;
    o.convert_for = true;
    TransformResult r = transform_program(p, o);
    for (int t = 0; t < 40; ++t) {
        std::vector<Value> args{I(bound(rng)), I(bound(rng)), I(step(rng))};
        CHECK(run_differential(p, r.program, Catalog{}, args).equal);
    }
}

TEST_CASE("loops outside the pattern are not convertible") {
    SUBCASE("increment of another variable") {
        Program p = for_routine("@i = 0; @i < 3; @j = @j + 1");
        CHECK(error_of([&] { for_iteration_query(first_for(p)); }) == ErrorKind::NotConvertible);
    }
    SUBCASE("subquery in the condition") {
        Program p = for_routine("@i = 0; @i < (SELECT COUNT(*) FROM nation); @i = @i + 1");
        CHECK(error_of([&] { for_iteration_query(first_for(p)); }) == ErrorKind::NotConvertible);
    }
    SUBCASE("body writes the induction variable") {
        Program p = for_routine("@i = 0; @i < 10; @i = @i + 1", "SET @i = @i + 1; SET @s = @s + @i;");
        Program q = p;
        std::vector<std::string> notes;
        CHECK(convert_for_loops(q, &notes) == 0);
        CHECK(q == p);
        REQUIRE(notes.size() == 1);
        CHECK(notes[0].find("writes its induction variable") != std::string::npos);
    }
    SUBCASE("body writes a bound") {
        Program p = for_routine("@i = 0; @i < @m; @i = @i + 1", "SET @m = @m - 1; SET @s = @s + @i;");
        Program q = p;
        CHECK(convert_for_loops(q) == 0);
    }
    SUBCASE("decimal induction variable") {
        Program p = for_routine("@d = 0; @d < 3; @d = @d + 1", "SET @s = @s + 1;");
        Program q = p;
        CHECK(convert_for_loops(q) == 0);
    }
}
