// One PASS/FAIL line per acceptance criterion; exit status 1 if any fails.

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "aggify/aggify.hpp"
#include "aggify/cli.hpp"
#include "aggify/engine.hpp"
#include "aggify/enhance.hpp"
#include "aggify/error.hpp"
#include "aggify/frontend.hpp"
#include "aggify/fuzz.hpp"
#include "../support/support.hpp"

using namespace aggify;
namespace fs = std::filesystem;

namespace {

struct Verdict {
    bool pass = false;
    std::string detail;
};

std::set<std::string> as_set(const std::vector<std::string>& v) { return {v.begin(), v.end()}; }

std::string join(const std::set<std::string>& s) {
    std::string out = "{";
    for (const auto& x : s) out += (out.size() > 1 ? "," : "") + x;
    return out + "}";
}

std::vector<std::string> param_names(const RewritePlan& plan) {
    std::vector<std::string> out;
    for (const auto& p : plan.aggregate.params) out.push_back(p.name.substr(1));
    return out;
}

Catalog fixture_catalog() { return load_catalog(testsupport::fixtures() / "data"); }

// ---- 1 ----
Verdict set_goldens() {
    struct Golden {
        std::string file;
        ParamNaming naming;
        std::set<std::string> v_f, p_accum, v_init, v_term;
    };
    std::vector<Golden> goldens = {
        {"min_cost_supp.csl", ParamNaming::Prefixed, {"minCost", "lb", "suppName", "isInitialized"},
         {"pCost", "sName", "pMinCost", "pLb"}, {"minCost", "lb"}, {"suppName"}},
        {"cumulative_roi.csl", ParamNaming::Same, {"cumulativeROI", "isInitialized"}, {"monthlyROI", "cumulativeROI"},
         {"cumulativeROI"}, {"cumulativeROI"}},
    };
    for (const auto& g : goldens) {
        AggifyOptions o;
        o.naming = g.naming;
        TransformResult r = transform_program(testsupport::parse_fixture(g.file), o);
        if (r.plans.size() != 1) return {false, g.file + ": expected one rewritten loop"};
        const auto& plan = r.plans[0];
        auto check = [&](const char* what, const std::set<std::string>& got, const std::set<std::string>& want) {
            return got == want ? std::string() : g.file + " " + what + " = " + join(got) + ", want " + join(want);
        };
        for (const auto& msg : {check("V_F", as_set(plan.sets.v_f), g.v_f),
                                check("P_accum", as_set(param_names(plan)), g.p_accum),
                                check("V_init", as_set(plan.sets.v_init), g.v_init),
                                check("V_term", as_set(plan.sets.v_term), g.v_term)})
            if (!msg.empty()) return {false, msg};
    }
    return {true, "both routines match all four sets"};
}

// ---- 2 ----
Verdict differential() {
    int jobs = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    FuzzSummary s = run_fuzz(42, 500, jobs);
    if (s.failures) return {false, "fuzz case " + std::to_string(s.failed[0].first) + ": " + s.failed[0].second.reason};
    Catalog catalog = fixture_catalog();
    int fixtures = 0, vectors = 0;
    for (const auto& e : fs::directory_iterator(testsupport::fixtures())) {
        if (e.path().extension() != ".csl") continue;
        std::string source = testsupport::read_file(e.path());
        Program p = parse_source(source, ParseOptions{true});
        for (bool enhanced : {false, true}) {
            AggifyOptions o;
            o.enable_motion = enhanced;
            o.convert_for = enhanced;
            Program t = transform_program(p, o).program;
            for (const auto& args : embedded_args(source)) {
                DifferentialVerdict v = run_differential(p, t, catalog, args);
                if (!v.equal) return {false, e.path().filename().string() + ": " + v.reason};
                ++vectors;
            }
        }
        ++fixtures;
    }
    if (fixtures < 12) return {false, "only " + std::to_string(fixtures) + " fixtures"};
    return {true, std::to_string(s.cases) + " fuzz cases (" + std::to_string(s.loops_transformed) +
                      " loops rewritten) and " + std::to_string(fixtures) + " fixtures (" + std::to_string(vectors) +
                      " runs) equal"};
}

// ---- 3 ----
Verdict order_enforcement() {
    std::string source = testsupport::read_file(testsupport::fixtures() / "ordered_concat.csl");
    Program p = parse_source(source, ParseOptions{true});
    Catalog catalog = fixture_catalog();
    auto args = embedded_args(source);

    TransformResult sorted = transform_program(p);
    if (sorted.plans.empty() || !sorted.plans[0].aggregate.order_sensitive)
        return {false, "rewrite is not order-sensitive"};
    for (const auto& a : args) {
        DifferentialVerdict v = run_differential(p, sorted.program, catalog, a);
        if (!v.equal) return {false, "sorted rewrite differs: " + v.reason};
    }

    AggifyOptions o;
    o.ignore_order = true;
    Program unsorted = transform_program(p, o).program;
    int differing = 0, runs = 0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        Catalog shuffled = shuffle_catalog(catalog, seed);
        for (const auto& a : args) {
            ++runs;
            if (!run_differential(p, unsorted, catalog, a, RunOptions{}, &shuffled).equal) ++differing;
        }
    }
    return {true, "sorted rewrite equal on " + std::to_string(args.size()) + " keys; unsorted rewrite on shuffled input "
                  "differs in " + std::to_string(differing) + " of " + std::to_string(runs) + " runs"};
}

// ---- 4 ----
Verdict materialization() {
    Program p = testsupport::parse_fixture("min_cost_supp.csl");
    Program t = transform_program(p).program;
    Catalog catalog = fixture_catalog();
    // 1,000 outer rows, one call each.
    Relation outer;
    outer.columns = {{"part", ScalarType::Int}};
    for (int i = 0; i < 1000; ++i) outer.rows.push_back({Value::integer(1 + i % 31)});
    ExecStats before, after;
    for (const auto& row : outer.rows) {
        before += interpret_program(p, catalog, {row[0]}).stats;
        after += interpret_program(t, catalog, {row[0]}).stats;
    }
    std::ostringstream d;
    d << "materializations " << before.cursor_materializations << " -> " << after.cursor_materializations
      << ", materialized rows " << before.materialized_rows << " -> " << after.materialized_rows;
    bool ok = before.cursor_materializations == 1000 && after.cursor_materializations == 0 &&
              before.materialized_rows > 0 && after.materialized_rows == 0;
    return {ok, d.str()};
}

// ---- 5 ----
Verdict data_movement() {
    const int cols = 50, rows = 30000;
    Relation wide;
    std::mt19937_64 rng(5);
    for (int c = 0; c < cols; ++c) wide.columns.push_back({"r" + std::to_string(c), ScalarType::Decimal});
    for (int r = 0; r < rows; ++r) {
        Row row;
        for (int c = 0; c < cols; ++c)
            row.push_back(Value::decimal(Decimal{std::uniform_int_distribution<int>(-3, 3)(rng)}));  // a few millionths
        wide.rows.push_back(std::move(row));
    }
    Catalog catalog;
    catalog.add("wide_investments", std::move(wide));

    std::string decl, select, into, body, ret;
    for (int c = 0; c < cols; ++c) {
        std::string k = std::to_string(c);
        decl += "    DECLARE @cum" + k + " DECIMAL = 1.0;\n    DECLARE @m" + k + " DECIMAL;\n";
        select += (c ? ", r" : "r") + k;
        into += (c ? ", @m" : "@m") + k;
        body += "        SET @cum" + k + " = @cum" + k + " * (@m" + k + " + 1);\n";
        ret += (c ? ", '|', @cum" : "@cum") + k;
    }
    std::string src = "CREATE FUNCTION wideROI() RETURNS VARCHAR AS\nBEGIN\n" + decl + "    DECLARE c CURSOR FOR SELECT " +
                      select + " FROM wide_investments;\n    OPEN c;\n    FETCH NEXT FROM c INTO " + into +
                      ";\n    WHILE @@FETCH_STATUS = 0\n    BEGIN\n" + body + "        FETCH NEXT FROM c INTO " + into +
                      ";\n    END\n    CLOSE c;\n    DEALLOCATE c;\n    RETURN concat(" + ret + ");\nEND\n";
    Program p = parse_source(src);
    AggifyOptions o;
    o.naming = ParamNaming::Same;
    Program t = transform_program(p, o).program;
    RunOptions ro;
    ro.client_mode = true;
    DifferentialVerdict v = run_differential(p, t, catalog, {}, ro);
    if (!v.equal) return {false, "results differ: " + v.reason};
    std::int64_t b0 = v.original.result->stats.bytes_moved_to_client;
    std::int64_t b1 = v.transformed.result->stats.bytes_moved_to_client;
    std::int64_t want0 = std::int64_t{cols} * 9 * rows, want1 = std::int64_t{cols} * 9;
    return {b0 == want0 && b1 == want1,
            "bytes moved " + std::to_string(b0) + " -> " + std::to_string(b1) + " (want " + std::to_string(want0) +
                " -> " + std::to_string(want1) + ")"};
}

// ---- 6 ----
Verdict dataflow_oracle() {
    std::mt19937_64 rng(6);
    for (int i = 0; i < 200; ++i) {
        Cfg cfg = testsupport::random_cfg(rng);
        std::string msg = testsupport::check_against_oracle(cfg);
        if (!msg.empty()) return {false, "graph " + std::to_string(i) + ": " + msg};
    }
    return {true, "200 random graphs agree with path enumeration"};
}

// ---- 7 ----
Verdict applicability_gate() {
    int n = 0, k = 0, aggifyable = 0;
    fs::path corpus = testsupport::fixtures() / "corpus" / "dml_mix";
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(corpus))
        if (e.path().extension() == ".csl") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
        std::string source = testsupport::read_file(f);
        Program p = parse_source(source, ParseOptions{true});
        ApplicabilityCounts c = applicability(p);
        n += c.cursor_loops;
        aggifyable += c.aggifyable;
        // Ground truth for k straight from the tree.
        walk_stmts(p.body, [&](const Stmt& s) {
            const auto* w = s.as<WhileStmt>();
            if (!w || !w->is_fetch_loop()) return;
            bool dml = false;
            walk_stmts(w->body, [&](const Stmt& x) { dml = dml || x.as<DmlStmt>(); });
            k += dml;
        });

        TransformResult r = transform_program(p);
        if (r.plans.empty()) {
            // Nothing rewritten: the command writes the input back byte for byte.
            fs::path out = fs::temp_directory_path() / "aggify_acceptance_gate";
            std::string file = f.string(), dir = out.string();
            const char* argv[] = {"aggify", "transform", file.c_str(), "--out", dir.c_str()};
            std::ostringstream o, e;
            if (run_cli(5, argv, o, e) != 0) return {false, "transform failed on " + file};
            if (testsupport::read_file(out / (f.stem().string() + ".aggified.csl")) != source)
                return {false, f.filename().string() + " was not copied unchanged"};
        }
        std::string printed = pretty_print(r.program);
        std::string original = pretty_print(p);
        for (const auto& l : r.loops) {
            if (l.transformed) continue;
            // The printed statements from the cursor DECLARE to its DEALLOCATE
            // must appear unchanged in the printed output.
            auto slice = [&](const std::string& text) {
                auto start = text.find("DECLARE " + l.cursor + " CURSOR");
                auto end = text.find("DEALLOCATE " + l.cursor + ";", start);
                return start == std::string::npos || end == std::string::npos ? std::string()
                                                                               : text.substr(start, end - start);
            };
            std::string before = slice(original);
            if (before.empty() || before != slice(printed))
                return {false, "rejected loop " + l.cursor + " in " + f.filename().string() + " changed"};
        }
    }
    std::ostringstream d;
    d << n << " cursor loops, " << k << " with persistent DML, " << aggifyable << " rewritable";
    return {n > 0 && k > 0 && aggifyable == n - k, d.str()};
}

// ---- 8 ----
Verdict for_conversion() {
    Program p = testsupport::parse_fixture("for_sum.csl");
    AggifyOptions o;
    o.convert_for = true;
    TransformResult r = transform_program(p, o);
    Catalog empty;
    RunResult base = interpret_program(p, empty, {});
    RunResult conv = interpret_program(r.program, empty, {});
    if (r.for_loops_converted != 1 || r.plans.size() != 1) return {false, "FOR loop was not converted and rewritten"};
    if (!(base.return_value == Value::integer(5050)) || !(conv.return_value == Value::integer(5050)))
        return {false, "sum is " + conv.return_value.to_display()};

    std::mt19937_64 rng(8);
    auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
    for (int i = 0; i < 50; ++i) {
        int init = pick(-10, 10), step = pick(1, 5), bound = pick(-15, 60);
        bool down = pick(0, 3) == 0;
        std::string cond = down ? "@i >= " + std::to_string(-bound) : (pick(0, 1) ? "@i <= " : "@i < ") + std::to_string(bound);
        std::string incr = down ? "@i - " + std::to_string(step) : "@i + " + std::to_string(step);
        std::string src = "CREATE FUNCTION iters() RETURNS INT AS\nBEGIN\n    DECLARE @n INT = 0;\n    DECLARE @i INT;\n"
                          "    FOR (@i = " + std::to_string(init) + "; " + cond + "; @i = " + incr + ")\n"
                          "        SET @n = @n + 1;\n    RETURN @n;\nEND\n";
        Program fp = parse_source(src);
        std::int64_t iterations = interpret_program(fp, empty, {}).return_value.as_int();
        const ForStmt* f = nullptr;
        walk_stmts(fp.body, [&](const Stmt& s) { f = f ? f : s.as<ForStmt>(); });
        ExecStats stats;
        Relation cte = eval_query(for_iteration_query(*f), empty, {}, nullptr, stats);
        Program ft = transform_program(fp, o).program;
        Value after = interpret_program(ft, empty, {}).return_value;
        if (static_cast<std::int64_t>(cte.rows.size()) != iterations || !(after == Value::integer(iterations)))
            return {false, src + "iterations " + std::to_string(iterations) + ", query rows " +
                               std::to_string(cte.rows.size()) + ", rewritten " + after.to_display()};
    }
    return {true, "sum 5050 after conversion; 50 random loops match their iteration query"};
}

} // namespace

int main() {
    struct Criterion {
        int id;
        const char* name;
        std::function<Verdict()> run;
        double budget_s;
    };
    std::vector<Criterion> criteria = {
        {1, "set goldens", set_goldens, 1},
        {2, "differential equivalence", differential, 60},
        {3, "order enforcement", order_enforcement, 1},
        {4, "materialization elimination", materialization, 5},
        {5, "data movement", data_movement, 10},
        {6, "dataflow oracle", dataflow_oracle, 10},
        {7, "applicability gate", applicability_gate, 5},
        {8, "FOR conversion", for_conversion, 5},
    };
    int failed = 0;
    for (const auto& c : criteria) {
        auto t0 = std::chrono::steady_clock::now();
        Verdict o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (o.pass && secs > c.budget_s) {
            o.pass = false;
            o.detail += "; over the time budget";
        }
        char timing[64];
        std::snprintf(timing, sizeof timing, "%.2fs of %.0fs", secs, c.budget_s);
        std::cout << "criterion " << c.id << " [" << c.name << "]: " << (o.pass ? "PASS" : "FAIL") << " - "
                  << o.detail << " (" << timing << ")" << std::endl;
        failed += !o.pass;
    }
    return failed ? 1 : 0;
}
