#include <doctest.h>

#include <cstring>
#include <fstream>

#include "aggify/aggify.hpp"
#include "aggify/engine.hpp"
#include "aggify/frontend.hpp"
#include "../support/support.hpp"

using namespace aggify;
namespace fs = std::filesystem;

namespace {

Value I(std::int64_t v) { return Value::integer(v); }
Value D(const char* s) { return Value::decimal(*Decimal::parse(s)); }
Value S(const char* s) { return Value::varchar(s); }

Relation rel(std::vector<Column> cols, std::vector<Row> rows) { return Relation{std::move(cols), std::move(rows)}; }

// Three part-supplier rows and two suppliers; small enough to simulate by hand.
Catalog micro() {
    Catalog c;
    c.add("partsupp", rel({{"ps_partkey", ScalarType::Int}, {"ps_suppkey", ScalarType::Int},
                           {"ps_supplycost", ScalarType::Decimal}},
                          {{I(1), I(1), D("30.5")}, {I(1), I(2), D("12.25")}, {I(1), I(1), D("9.75")}}));
    c.add("supplier", rel({{"s_suppkey", ScalarType::Int}, {"s_name", ScalarType::Varchar}},
                          {{I(1), S("alpha")}, {I(2), S("beta")}}));
    c.add("lowerbound", rel({{"lb_partkey", ScalarType::Int}, {"lb_cost", ScalarType::Decimal}}, {}));
    c.add("t", rel({{"k", ScalarType::Int}, {"v", ScalarType::Int}, {"s", ScalarType::Varchar}},
                   {{I(1), I(10), S("a")}, {I(2), Value::null(), S("b")}, {I(2), I(30), S("c")}, {I(3), I(40), S("d")}}));
    return c;
}

Relation query(const std::string& sql, const Catalog& c, std::map<std::string, Value> env = {}) {
    ExecStats stats;
    return eval_query(parse_query(sql), c, env, nullptr, stats);
}

Value scalar(const std::string& sql, const Catalog& c = micro()) {
    Relation r = query(sql, c);
    REQUIRE(r.rows.size() == 1);
    return r.rows[0][0];
}

Value run(const std::string& src, std::vector<Value> args = {}, const Catalog& c = micro(), RunOptions o = {}) {
    return interpret_program(parse_source(src), c, args, o).return_value;
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

fs::path scratch(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("aggify_engine_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

const char* kSumLoop = R"(
CREATE FUNCTION total(@k INT) RETURNS INT AS
BEGIN
    DECLARE @v INT; DECLARE @s INT = 0;
    DECLARE c CURSOR FOR SELECT v FROM t WHERE k >= @k;
    OPEN c;
    FETCH NEXT FROM c INTO @v;
    WHILE @@FETCH_STATUS = 0
    BEGIN
        IF @v IS NOT NULL SET @s = @s + @v;
        FETCH NEXT FROM c INTO @v;
    END
    CLOSE c;
    DEALLOCATE c;
    RETURN @s;
END
)";

} // namespace

TEST_CASE("decimal parsing and printing") {
    CHECK(Decimal::parse("12.5")->to_string() == "12.5");
    CHECK(Decimal::parse("-0.000001")->scaled == -1);
    CHECK(Decimal::parse("3")->scaled == 3 * Decimal::kOne);
    CHECK_FALSE(Decimal::parse("1.2.3").has_value());
    CHECK_FALSE(Decimal::parse("abc").has_value());
}

TEST_CASE("arithmetic keeps types and detects overflow") {
    CHECK(add(I(2), I(3)) == I(5));
    CHECK(add(I(2), D("0.5")) == D("2.5"));
    CHECK(multiply(D("1.5"), D("1.5")) == D("2.25"));
    CHECK(divide(I(7), I(2)) == I(3));
    CHECK(divide(D("1"), I(3)) == D("0.333333"));
    CHECK(modulo(I(7), I(3)) == I(1));
    CHECK(add(I(1), Value::null()).is_null());
    CHECK(error_of([] { add(I(INT64_MAX), I(1)); }) == ErrorKind::ArithmeticOverflow);
    CHECK(error_of([] { negate(I(INT64_MIN)); }) == ErrorKind::ArithmeticOverflow);
    CHECK(error_of([] { divide(I(1), I(0)); }) == ErrorKind::Runtime);
    CHECK(error_of([] { add(I(1), Value::boolean(true)); }) == ErrorKind::Type);
}

TEST_CASE("comparison treats NULL as unknown and sorts it first") {
    CHECK_FALSE(compare(I(1), Value::null()).has_value());
    CHECK(compare(I(2), D("1.5")) == 1);
    CHECK(compare(S("a"), S("b")) == -1);
    CHECK(sort_compare(Value::null(), I(-5)) < 0);
    CHECK(sort_compare(Value::null(), Value::null()) == 0);
}

TEST_CASE("coercion widens int and truncates decimal") {
    CHECK(coerce(I(3), ScalarType::Decimal) == D("3"));
    CHECK(coerce(D("2.9"), ScalarType::Int) == I(2));
    CHECK(coerce(D("-2.9"), ScalarType::Int) == I(-2));
    CHECK(coerce(Value::null(), ScalarType::Int).is_null());
    CHECK(error_of([] { coerce(S("1"), ScalarType::Int); }) == ErrorKind::Type);
}

TEST_CASE("three-valued logic") {
    Catalog c = micro();
    CHECK(scalar("SELECT COUNT(*) FROM t WHERE v > 15", c) == I(2));
    CHECK(scalar("SELECT COUNT(*) FROM t WHERE NOT (v > 15)", c) == I(1));
    CHECK(scalar("SELECT COUNT(*) FROM t WHERE v > 15 OR k = 2", c) == I(3));
    CHECK(scalar("SELECT COUNT(*) FROM t WHERE v IS NULL", c) == I(1));
    CHECK(run("CREATE FUNCTION f() RETURNS INT AS BEGIN DECLARE @n INT; "
              "IF @n = 1 OR NOT (@n = 1) RETURN 1; RETURN 2; END") == I(2));
    CHECK(run("CREATE FUNCTION f() RETURNS INT AS BEGIN DECLARE @n INT; "
              "IF @n = 1 AND 1 = 0 RETURN 1; IF @n = 1 OR 1 = 1 RETURN 3; RETURN 2; END") == I(3));
}

TEST_CASE("joins, filters and projections") {
    Catalog c = micro();
    Relation r = query("SELECT s_name, ps_supplycost FROM partsupp, supplier WHERE ps_suppkey = s_suppkey "
                       "ORDER BY ps_supplycost",
                       c);
    REQUIRE(r.rows.size() == 3);
    CHECK(r.rows[0] == Row{S("alpha"), D("9.75")});
    CHECK(r.rows[2] == Row{S("alpha"), D("30.5")});
    CHECK(query("SELECT k FROM t WHERE 1 = 0", c).rows.empty());
    CHECK(query("SELECT * FROM t", c).columns.size() == 3);
}

TEST_CASE("grouping, aggregates, HAVING, TOP") {
    Catalog c = micro();
    Relation g = query("SELECT k, COUNT(*) AS n, SUM(v) AS s, COUNT(v) AS nv FROM t GROUP BY k ORDER BY k", c);
    REQUIRE(g.rows.size() == 3);
    CHECK(g.rows[1] == Row{I(2), I(2), I(30), I(1)});
    CHECK(query("SELECT k FROM t GROUP BY k HAVING COUNT(*) > 1", c).rows.size() == 1);
    CHECK(scalar("SELECT MIN(v) FROM t", c) == I(10));
    CHECK(scalar("SELECT MAX(s) FROM t", c) == S("d"));
    CHECK(scalar("SELECT SUM(v) FROM t WHERE 1 = 0", c).is_null());
    CHECK(scalar("SELECT COUNT(*) FROM t WHERE 1 = 0", c) == I(0));
    Relation top = query("SELECT TOP 2 k FROM t ORDER BY k DESC, s DESC", c);
    REQUIRE(top.rows.size() == 2);
    CHECK(top.rows[0][0] == I(3));
    CHECK(top.rows[1] == Row{I(2)});
}

TEST_CASE("ORDER BY is stable on duplicate keys") {
    Relation r = query("SELECT s FROM t ORDER BY k", micro());
    CHECK(r.rows[1][0] == S("b"));
    CHECK(r.rows[2][0] == S("c"));
}

TEST_CASE("recursive query enumerates past the bound once") {
    Relation r = query("WITH RECURSIVE cte (i) AS (SELECT 0 UNION ALL SELECT i + 1 FROM cte WHERE i <= 100) "
                       "SELECT i FROM cte",
                       micro());
    REQUIRE(r.rows.size() == 102);
    for (std::size_t i = 0; i < r.rows.size(); ++i) CHECK(r.rows[i][0] == I(static_cast<std::int64_t>(i)));
}

TEST_CASE("runaway recursion hits the depth cap") {
    ExecStats stats;
    RunOptions o;
    o.cte_depth_cap = 50;
    QuerySpec q = parse_query("WITH RECURSIVE cte (i) AS (SELECT 0 UNION ALL SELECT i + 1 FROM cte) SELECT i FROM cte");
    CHECK(error_of([&] { eval_query(q, micro(), {}, nullptr, stats, o); }) == ErrorKind::DepthExceeded);
}

TEST_CASE("variables bind into queries") {
    Relation r = query("SELECT s FROM t WHERE k = @k ORDER BY s", micro(), {{"@k", I(2)}});
    CHECK(r.rows.size() == 2);
}

TEST_CASE("simple programs") {
    CHECK(run("CREATE FUNCTION f() RETURNS INT AS BEGIN RETURN 1 + 1; END") == I(2));
    CHECK(run("CREATE FUNCTION f(@a INT, @b INT = 5) RETURNS INT AS BEGIN RETURN @a * @b; END", {I(3)}) == I(15));
    CHECK(run("CREATE FUNCTION f() RETURNS INT AS BEGIN DECLARE @i INT = 0; WHILE @i < 10 SET @i = @i + 3; "
              "RETURN @i; END") == I(12));
    CHECK(run("CREATE FUNCTION f() RETURNS INT AS BEGIN DECLARE @d INT = 7.9; RETURN @d; END") == I(7));
    CHECK(run("CREATE FUNCTION f() RETURNS VARCHAR AS BEGIN RETURN concat('a', 1, NULL, 2.5); END") == S("a12.5"));
    CHECK(run("CREATE FUNCTION f() RETURNS INT AS BEGIN DECLARE @x INT; "
              "SET @x = COALESCE((SELECT MAX(v) FROM t WHERE k = 9), -1); RETURN @x; END") == I(-1));
}

TEST_CASE("cursor loop semantics") {
    CHECK(run(kSumLoop, {I(1)}) == I(80));
    CHECK(run(kSumLoop, {I(3)}) == I(40));
    // Empty query: the body never runs and locals keep their values.
    auto res = interpret_program(parse_source(kSumLoop), micro(), {I(9)});
    CHECK(res.return_value == I(0));
    CHECK(res.variables.at("@v").is_null());
    CHECK(res.stats.cursor_materializations == 1);
    CHECK(res.stats.materialized_rows == 0);
}

TEST_CASE("reference routine matches a hand simulation of its loop") {
    Program p = testsupport::parse_fixture("min_cost_supp.csl");
    Catalog c = micro();
    // Rows (30.5, alpha), (12.25, beta), (9.75, alpha); lower bound 10 keeps 12.25.
    CHECK(interpret_program(p, c, {I(1), I(10)}).return_value == S("beta"));
    CHECK(interpret_program(p, c, {I(1), I(0)}).return_value == S("alpha"));
    CHECK(interpret_program(p, c, {I(1), I(40)}).return_value.is_null());
    TransformResult t = transform_program(p);
    REQUIRE(t.plans.size() == 1);
    for (std::int64_t lb : {0, 10, 20, 40, -1}) {
        auto v = run_differential(p, t.program, c, {I(1), I(lb)});
        CAPTURE(lb);
        CHECK(v.equal);
        CHECK(v.transformed.result->stats.cursor_materializations == 0);
    }
}

TEST_CASE("client mode counts rows and bytes reaching the routine") {
    RunOptions o;
    o.client_mode = true;
    auto res = interpret_program(parse_source(kSumLoop), micro(), {I(1)}, o);
    CHECK(res.stats.rows_moved_to_client == 4);
    CHECK(res.stats.bytes_moved_to_client == 16);

    Program roi = testsupport::parse_fixture("cumulative_roi.csl");
    TransformResult t = transform_program(roi);
    Catalog data = load_catalog(testsupport::fixtures() / "data");
    auto v = run_differential(roi, t.program, data, {}, o);
    REQUIRE(v.equal);
    auto n = static_cast<std::int64_t>(data.find("monthly_investments")->rows.size());
    CHECK(v.original.result->stats.rows_moved_to_client == n);
    CHECK(v.transformed.result->stats.rows_moved_to_client == 1);
}

TEST_CASE("record results are as wide as their fields") {
    Record r{{"a", "b"}, {ScalarType::Int, ScalarType::Varchar}, {I(1), S("x")}};
    Value v = Value::record(std::make_shared<const Record>(r));
    CHECK(value_width(v, ScalarType::Record) == type_width(ScalarType::Int) + type_width(ScalarType::Varchar));
}

TEST_CASE("runtime faults") {
    CHECK(error_of([] { run("CREATE FUNCTION f() RETURNS INT AS BEGIN RETURN 1 / 0; END"); }) == ErrorKind::Runtime);
    CHECK(error_of([] { run("CREATE FUNCTION f() RETURNS INT AS BEGIN DECLARE @x INT; SET @x = (SELECT v FROM t); "
                            "RETURN @x; END"); }) == ErrorKind::Runtime);
    CHECK(error_of([] { run("CREATE FUNCTION f() RETURNS INT AS BEGIN IF 1 RETURN 1; RETURN 0; END"); }) ==
          ErrorKind::Type);
    CHECK(error_of([] {
              RunOptions o;
              o.max_loop_iterations = 100;
              run("CREATE FUNCTION f() RETURNS INT AS BEGIN WHILE 1 = 1 SKIP; RETURN 0; END", {}, micro(), o);
          }) == ErrorKind::Runtime);
    CHECK(error_of([] { run("CREATE FUNCTION f() RETURNS INT AS BEGIN RETURN (SELECT nope(v) FROM t); END"); }) ==
          ErrorKind::UnknownAggregate);
    CHECK(error_of([] {
              run("CREATE FUNCTION f() RETURNS VARCHAR AS BEGIN DECLARE @s VARCHAR = 'ab'; "
                  "WHILE 1 = 1 SET @s = concat(@s, @s); RETURN @s; END");
          }) == ErrorKind::Runtime);
}

TEST_CASE("differential comparison catches a changed result and matching errors") {
    Program a = parse_source("CREATE FUNCTION f(@x INT) RETURNS INT AS BEGIN RETURN @x + 1; END");
    Program b = parse_source("CREATE FUNCTION f(@x INT) RETURNS INT AS BEGIN RETURN @x + 2; END");
    Program z = parse_source("CREATE FUNCTION f(@x INT) RETURNS INT AS BEGIN RETURN @x / 0; END");
    CHECK(run_differential(a, a, micro(), {I(1)}).equal);
    CHECK_FALSE(run_differential(a, b, micro(), {I(1)}).equal);
    auto both_fail = run_differential(z, z, micro(), {I(1)});
    CHECK(both_fail.equal);
    CHECK(both_fail.original.error == ErrorKind::Runtime);
    CHECK_FALSE(run_differential(a, z, micro(), {I(1)}).equal);
}

TEST_CASE("local tables compare as multisets unless read back") {
    const char* fill_asc = "CREATE PROCEDURE p() AS BEGIN DECLARE @o TABLE(x INT); "
                           "INSERT INTO @o VALUES (1); INSERT INTO @o VALUES (2); END";
    const char* fill_desc = "CREATE PROCEDURE p() AS BEGIN DECLARE @o TABLE(x INT); "
                            "INSERT INTO @o VALUES (2); INSERT INTO @o VALUES (1); END";
    CHECK(run_differential(parse_source(fill_asc), parse_source(fill_desc), micro(), {}).equal);
    std::string read_asc = std::string(fill_asc).replace(std::strlen(fill_asc) - 4, 4,
                                                         "DECLARE @f INT; SET @f = (SELECT TOP 1 x FROM @o); END");
    std::string read_desc = std::string(fill_desc).replace(std::strlen(fill_desc) - 4, 4,
                                                           "DECLARE @f INT; SET @f = (SELECT TOP 1 x FROM @o); END");
    CHECK(tables_read(parse_source(read_asc)) == std::vector<std::string>{"@o"});
    CHECK_FALSE(run_differential(parse_source(read_asc), parse_source(read_desc), micro(), {}).equal);
}

TEST_CASE("catalog loading") {
    Catalog c = load_catalog(testsupport::fixtures() / "data");
    CHECK(c.find("partsupp") != nullptr);
    CHECK(c.find("supplier") != nullptr);
    CHECK(c.find("PARTSUPP") != nullptr);

    fs::path dir = scratch("csv");
    std::ofstream(dir / "empty.csv") << "a:INT,b:VARCHAR\n";
    CHECK(load_csv(dir / "empty.csv").rows.empty());
    CHECK(load_csv(dir / "empty.csv").columns.size() == 2);

    std::ofstream(dir / "bad.csv") << "a:INT\nx\n";
    CHECK(error_of([&] { load_csv(dir / "bad.csv"); }) == ErrorKind::Schema);

    std::ofstream(dir / "nulls.csv") << "a:INT,b:VARCHAR\n,NULL\n3,\"q,\"\"r\"\"\"\n";
    Relation n = load_csv(dir / "nulls.csv");
    CHECK(n.rows[0][0].is_null());
    CHECK(n.rows[0][1].is_null());
    CHECK(n.rows[1][1] == S("q,\"r\""));

    Catalog dup;
    dup.add("x", n);
    CHECK(error_of([&] { dup.add("x", n); }) == ErrorKind::DuplicateTable);
}

TEST_CASE("catalogs round-trip through CSV and shuffle deterministically") {
    Catalog c = micro();
    fs::path dir = scratch("roundtrip");
    save_catalog(c, dir);
    Catalog back = load_catalog(dir);
    for (const auto& [name, r] : c.tables) CHECK(*back.find(name) == *r);

    Catalog s1 = shuffle_catalog(c, 5), s2 = shuffle_catalog(c, 5);
    for (const auto& [name, r] : c.tables) {
        CHECK(*s1.find(name) == *s2.find(name));
        CHECK(s1.find(name)->rows.size() == r->rows.size());
    }
}

TEST_CASE("stats serialize to JSON") {
    ExecStats s;
    s.cursor_materializations = 2;
    CHECK(s.to_json().find("\"cursor_materializations\":2") != std::string::npos);
}
