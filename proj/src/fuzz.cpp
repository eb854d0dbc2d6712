#include "aggify/fuzz.hpp"

#include <atomic>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <thread>

#include "aggify/cli.hpp"
#include "aggify/error.hpp"
#include "aggify/frontend.hpp"

namespace aggify {
namespace {

namespace fs = std::filesystem;

struct Var {
    std::string name;
    ScalarType type;
    bool assignable;
};

class ProgramGen {
public:
    explicit ProgramGen(std::mt19937_64& rng) : rng_(rng) {}

    int range(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng_); }
    bool chance(double p) { return std::bernoulli_distribution(p)(rng_); }

    std::string cursor_program() {
        declare_vars();
        static const std::vector<std::pair<std::string, ScalarType>> columns = {
            {"k", ScalarType::Int}, {"v", ScalarType::Int}, {"d", ScalarType::Decimal}, {"s", ScalarType::Varchar}};
        int nfetch = range(1, 2);
        std::vector<int> picked;
        while (static_cast<int>(picked.size()) < nfetch) {
            int c = range(0, 3);
            if (std::find(picked.begin(), picked.end(), c) == picked.end()) picked.push_back(c);
        }
        std::string cols, into;
        for (std::size_t i = 0; i < picked.size(); ++i) {
            std::string f = "@f" + std::to_string(i + 1);
            decl_ += "    DECLARE " + f + " " + std::string(to_string(columns[picked[i]].second)) + ";\n";
            vars_.push_back({f, columns[picked[i]].second, false});
            cols += (i ? ", " : "") + columns[picked[i]].first;
            into += (i ? ", " : "") + f;
        }
        // Fetch targets may occasionally be overwritten inside the body.
        fetch_writable_ = chance(0.15);
        if (chance(0.3)) {
            has_out_ = true;
            decl_ += "    DECLARE @out TABLE (x INT, y VARCHAR);\n";
        }
        if (chance(0.15)) {
            nested_target_ = pick_assignable(ScalarType::Int);
            if (!nested_target_.empty()) decl_ += "    DECLARE @g INT;\n";
        }

        std::string query = "SELECT ";
        bool top = chance(0.1);
        if (top) query += "TOP " + std::to_string(range(1, 6)) + " ";
        query += cols + " FROM t";
        switch (range(0, 5)) {
        case 0: query += " WHERE k >= @p"; break;
        case 1: query += " WHERE v > 0"; break;
        case 2: query += " WHERE k = -1"; break;
        case 3: query += " WHERE s IS NOT NULL"; break;
        default: break;
        }
        if (top || chance(0.5)) {
            static const std::vector<std::string> orders = {"k", "k DESC", "s", "v, k", "d DESC", "k, s"};
            query += " ORDER BY " + orders[static_cast<std::size_t>(range(0, 5))];
        }

        std::string body;
        if (chance(0.25)) body += pre_loop();
        body += "    DECLARE c CURSOR FOR " + query + ";\n";
        body += "    OPEN c;\n";
        body += "    FETCH NEXT FROM c INTO " + into + ";\n";
        body += "    WHILE @@FETCH_STATUS = 0\n    BEGIN\n";
        body += stmts(1, 2);
        body += "        FETCH NEXT FROM c INTO " + into + ";\n";
        body += "    END\n";
        body += "    CLOSE c;\n    DEALLOCATE c;\n";
        if (chance(0.2)) body += post_loop();
        return wrap(body);
    }

    std::string for_program() {
        declare_vars();
        decl_ += "    DECLARE @i INT;\n";
        vars_.push_back({"@i", ScalarType::Int, false});
        std::string lo = chance(0.3) ? "@p" : std::to_string(range(-2, 3));
        std::string hi = chance(0.3) ? "@p + " + std::to_string(range(0, 8)) : std::to_string(range(0, 40));
        std::string cmp = chance(0.5) ? " <= " : " < ";
        std::string step = std::to_string(range(1, 3));
        std::string body;
        if (chance(0.25)) body += pre_loop();
        body += "    FOR (@i = " + lo + "; @i" + cmp + hi + "; @i = @i + " + step + ")\n    BEGIN\n";
        body += stmts(1, 2);
        body += "    END\n";
        if (chance(0.5)) observed_.push_back("@i");
        return wrap(body);
    }

private:
    std::mt19937_64& rng_;
    std::vector<Var> vars_;
    std::string decl_;
    std::vector<std::string> observed_;
    bool has_out_ = false;
    bool fetch_writable_ = false;
    bool nested_used_ = false;
    std::string nested_target_;
    int local_counter_ = 0;

    void declare_vars() {
        vars_.push_back({"@p", ScalarType::Int, false});
        static const std::vector<ScalarType> types = {ScalarType::Int, ScalarType::Decimal, ScalarType::Varchar,
                                                      ScalarType::Int};
        static const std::vector<std::string> names = {"@a", "@b", "@c", "@e"};
        int n = range(1, 4);
        for (int i = 0; i < n; ++i) {
            ScalarType ty = types[static_cast<std::size_t>(range(0, 3))];
            std::string line = "    DECLARE " + names[i] + " " + std::string(to_string(ty));
            int init = range(0, 4);
            if (init <= 2) line += " = " + literal(ty);
            else if (init == 3 && ty != ScalarType::Varchar) line += " = @p";
            decl_ += line + ";\n";
            vars_.push_back({names[i], ty, true});
            if (chance(0.8)) observed_.push_back(names[i]);
        }
        if (observed_.empty()) observed_.push_back(vars_[1].name);
    }

    std::string wrap(const std::string& body) {
        std::string ret = "concat(";
        for (std::size_t i = 0; i < observed_.size(); ++i) ret += (i ? ", '|', " : "") + observed_[i];
        ret += ")";
        return "CREATE FUNCTION fz(@p INT) RETURNS VARCHAR AS\nBEGIN\n" + decl_ + body + "    RETURN " + ret +
               ";\nEND\n";
    }

    std::string literal(ScalarType ty) {
        switch (ty) {
        case ScalarType::Int: return std::to_string(range(-5, 9));
        case ScalarType::Decimal: {
            static const std::vector<std::string> d = {"1.5", "0.25", "-2.75", "0", "3", "10.125"};
            return d[static_cast<std::size_t>(range(0, 5))];
        }
        default: {
            static const std::vector<std::string> s = {"'a'", "'b'", "''", "'xy'"};
            return s[static_cast<std::size_t>(range(0, 3))];
        }
        }
    }

    std::vector<const Var*> of_type(ScalarType ty, bool assignable_only) const {
        std::vector<const Var*> out;
        for (const auto& v : vars_)
            if (v.type == ty && (!assignable_only || v.assignable || (fetch_writable_ && v.name.rfind("@f", 0) == 0)))
                out.push_back(&v);
        return out;
    }

    std::string pick_assignable(ScalarType ty) {
        auto vs = of_type(ty, true);
        std::erase_if(vs, [](const Var* v) { return !v->assignable; });
        return vs.empty() ? std::string() : vs[static_cast<std::size_t>(range(0, static_cast<int>(vs.size()) - 1))]->name;
    }

    std::string var_of(ScalarType ty) {
        auto vs = of_type(ty, false);
        if (vs.empty()) return literal(ty);
        return vs[static_cast<std::size_t>(range(0, static_cast<int>(vs.size()) - 1))]->name;
    }

    std::string int_expr(int d) {
        int c = range(0, d > 0 ? 7 : 2);
        switch (c) {
        case 0: return literal(ScalarType::Int);
        case 1:
        case 2: return var_of(ScalarType::Int);
        case 3: return "(" + int_expr(d - 1) + " + " + int_expr(d - 1) + ")";
        case 4: return "(" + int_expr(d - 1) + " - " + int_expr(d - 1) + ")";
        case 5: return "abs(" + int_expr(d - 1) + ")";
        case 6: return "coalesce(" + int_expr(d - 1) + ", 0)";
        default: return "(" + int_expr(d - 1) + " * " + (chance(0.5) ? "-1" : "2") + ")";
        }
    }

    std::string dec_expr(int d) {
        int c = range(0, d > 0 ? 6 : 2);
        switch (c) {
        case 0: return literal(ScalarType::Decimal);
        case 1: return var_of(ScalarType::Decimal);
        case 2: return var_of(ScalarType::Int);
        case 3: return "(" + dec_expr(d - 1) + " + " + dec_expr(d - 1) + ")";
        case 4: return "(" + dec_expr(d - 1) + " - " + int_expr(d - 1) + ")";
        case 5: return "(" + dec_expr(d - 1) + " * 0.5)";
        default: return "coalesce(" + dec_expr(d - 1) + ", 0)";
        }
    }

    std::string any_expr(int d) {
        switch (range(0, 2)) {
        case 0: return int_expr(d);
        case 1: return dec_expr(d);
        default: return str_expr(d);
        }
    }

    std::string str_expr(int d) {
        int c = range(0, d > 0 ? 4 : 1);
        switch (c) {
        case 0: return literal(ScalarType::Varchar);
        case 1: return var_of(ScalarType::Varchar);
        case 2: return "concat(" + str_expr(d - 1) + ", " + any_expr(d - 1) + ")";
        case 3: return "upper(" + str_expr(d - 1) + ")";
        default: return var_of(ScalarType::Varchar);
        }
    }

    std::string bool_expr(int d) {
        static const std::vector<std::string> ops = {" < ", " <= ", " = ", " <> ", " > ", " >= "};
        int c = range(0, d > 0 ? 7 : 3);
        switch (c) {
        case 0:
        case 1: return int_expr(1) + ops[static_cast<std::size_t>(range(0, 5))] + int_expr(1);
        case 2: return var_of(ScalarType::Int) + (chance(0.5) ? " IS NULL" : " IS NOT NULL");
        case 3: return dec_expr(1) + ops[static_cast<std::size_t>(range(0, 5))] + dec_expr(0);
        case 4: return str_expr(0) + " = " + literal(ScalarType::Varchar);
        case 5: return "NOT (" + bool_expr(d - 1) + ")";
        case 6: return "(" + bool_expr(d - 1) + " AND " + bool_expr(d - 1) + ")";
        default: return "(" + bool_expr(d - 1) + " OR " + bool_expr(d - 1) + ")";
        }
    }

    std::string pad(int depth) const { return std::string(4 + 4 * depth, ' '); }

    std::string stmts(int depth, int max_count) {
        std::string out;
        int n = range(1, max_count + (depth == 1 ? 1 : 0));
        for (int i = 0; i < n; ++i) out += stmt(depth);
        return out;
    }

    std::string assign(int depth) {
        std::vector<const Var*> targets;
        for (const auto& v : vars_)
            if (v.assignable || (fetch_writable_ && v.name.rfind("@f", 0) == 0)) targets.push_back(&v);
        const Var& t = *targets[static_cast<std::size_t>(range(0, static_cast<int>(targets.size()) - 1))];
        std::string value;
        if (t.type == ScalarType::Varchar && chance(0.5)) {
            // concat fold: order of rows shows up in the result
            value = "concat(" + t.name + ", " + any_expr(0) + ")";
        } else if (t.type == ScalarType::Int) {
            value = chance(0.4) ? "(" + t.name + " + " + int_expr(1) + ")" : int_expr(2);
        } else if (t.type == ScalarType::Decimal) {
            value = chance(0.4) ? "(" + t.name + " + " + dec_expr(1) + ")" : dec_expr(2);
        } else {
            value = str_expr(2);
        }
        return pad(depth) + "SET " + t.name + " = " + value + ";\n";
    }

    std::string stmt(int depth) {
        int c = range(0, 9);
        if (c <= 4) return assign(depth);
        if (c <= 6 && depth < 3) {
            std::string s = pad(depth) + "IF " + bool_expr(2) + "\n" + pad(depth) + "BEGIN\n" + stmts(depth + 1, 2) +
                            pad(depth) + "END\n";
            if (chance(0.4)) s += pad(depth) + "ELSE\n" + pad(depth) + "BEGIN\n" + stmts(depth + 1, 1) + pad(depth) + "END\n";
            return s;
        }
        if (c == 7 && has_out_)
            return pad(depth) + "INSERT INTO @out VALUES (" + int_expr(1) + ", " + str_expr(1) + ");\n";
        if (c == 8) {
            std::string local = "@l" + std::to_string(++local_counter_);
            std::string target = pick_assignable(ScalarType::Int);
            if (target.empty()) return assign(depth);
            return pad(depth) + "DECLARE " + local + " INT = " + int_expr(1) + ";\n" + pad(depth) + "SET " + target +
                   " = " + target + " + " + local + ";\n";
        }
        if (c == 9 && depth == 1 && !nested_target_.empty() && !nested_used_) {
            nested_used_ = true;
            // The inner query must not read what the inner loop writes.
            std::string corr = var_of(ScalarType::Int);
            if (corr == nested_target_) corr = "@p";
            std::string p = pad(depth);
            return p + "DECLARE c2 CURSOR FOR SELECT w FROM u WHERE u.k = " + corr + ";\n" + p + "OPEN c2;\n" + p +
                   "FETCH NEXT FROM c2 INTO @g;\n" + p + "WHILE @@FETCH_STATUS = 0\n" + p + "BEGIN\n" + p +
                   "    SET " + nested_target_ + " = " + nested_target_ + " + @g;\n" + p +
                   "    FETCH NEXT FROM c2 INTO @g;\n" + p + "END\n" + p + "CLOSE c2;\n" + p + "DEALLOCATE c2;\n";
        }
        return assign(depth);
    }

    std::string pre_loop() {
        std::string t = pick_assignable(ScalarType::Int);
        if (t.empty()) return "";
        return "    SET " + t + " = @p + " + std::to_string(range(0, 3)) + ";\n";
    }

    std::string post_loop() {
        std::string t = pick_assignable(ScalarType::Int);
        if (t.empty()) return "";
        return "    SET " + t + " = " + t + " + 1;\n";
    }
};

Relation random_t(ProgramGen& g) {
    Relation r;
    r.columns = {{"k", ScalarType::Int}, {"v", ScalarType::Int}, {"d", ScalarType::Decimal}, {"s", ScalarType::Varchar}};
    int n = g.chance(0.1) ? 0 : g.range(1, 50);
    static const std::vector<std::string> tags = {"a", "b", "c", "dd", "e"};
    for (int i = 0; i < n; ++i) {
        Row row;
        row.push_back(Value::integer(g.range(0, 5)));
        row.push_back(g.chance(0.1) ? Value::null() : Value::integer(g.range(-20, 20)));
        row.push_back(g.chance(0.1) ? Value::null() : Value::decimal(Decimal{static_cast<std::int64_t>(g.range(-500, 500)) * 10'000}));
        row.push_back(g.chance(0.1) ? Value::null() : Value::varchar(tags[static_cast<std::size_t>(g.range(0, 4))]));
        r.rows.push_back(std::move(row));
    }
    return r;
}

Relation random_u(ProgramGen& g) {
    Relation r;
    r.columns = {{"k", ScalarType::Int}, {"w", ScalarType::Int}};
    int n = g.range(0, 20);
    for (int i = 0; i < n; ++i) r.rows.push_back({Value::integer(g.range(-2, 6)), Value::integer(g.range(-10, 10))});
    return r;
}

void stmt_positions(const Block& b, const BlockPath& path, std::vector<std::pair<BlockPath, int>>& out) {
    for (std::size_t i = 0; i < b.size(); ++i) {
        out.push_back({path, static_cast<int>(i)});
        auto kids = child_blocks(b[i]);
        for (std::size_t k = 0; k < kids.size(); ++k) {
            BlockPath q = path;
            q.push_back({static_cast<int>(i), static_cast<int>(k)});
            stmt_positions(*kids[k], q, out);
        }
    }
}

// Failure class: the reason up to its first number, quote or variable once any "args [..]: " prefix
// is gone. Shrinking must not wander off to a different bug.
std::string failure_class(const std::string& reason) {
    std::string r = reason;
    if (r.rfind("args ", 0) == 0) {
        auto pos = r.find("]: ");
        if (pos != std::string::npos) r = r.substr(pos + 3);
    }
    return r.substr(0, r.find_first_of("0123456789'@"));
}

bool still_fails(const FuzzCase& c, const std::string& cls) {
    try {
        FuzzVerdict v = check_case(c);
        return !v.equal && failure_class(v.reason) == cls;
    } catch (const std::exception&) {
        return false;
    }
}

} // namespace

FuzzCase generate_case(std::uint64_t seed, std::uint64_t index) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
    std::mt19937_64 rng(seq);
    ProgramGen g(rng);
    FuzzCase c;
    c.seed = index;
    bool use_for = g.chance(0.15);
    c.catalog.add("t", random_t(g));
    c.catalog.add("u", random_u(g));
    c.source = use_for ? g.for_program() : g.cursor_program();
    c.options.convert_for = use_for;
    c.options.enable_motion = g.chance(0.5);
    c.options.naming = g.chance(0.5) ? ParamNaming::Prefixed : ParamNaming::Same;
    for (int i = 0; i < 3; ++i)
        c.args.push_back({g.chance(0.1) ? Value::null() : Value::integer(g.range(-1, 5))});
    return c;
}

FuzzVerdict check_case(const FuzzCase& c) {
    FuzzVerdict v;
    Program p;
    try {
        p = parse_source(c.source, ParseOptions{true});
    } catch (const Error& e) {
        v.equal = false;
        v.reason = std::string("generated program does not parse: ") + e.what();
        return v;
    }
    TransformResult t;
    try {
        t = transform_program(p, c.options);
    } catch (const Error& e) {
        v.equal = false;
        v.reason = std::string("transform failed: ") + e.what();
        return v;
    }
    for (const auto& l : t.loops) (l.transformed ? v.loops_transformed : v.loops_rejected) += 1;
    try {
        if (!(parse_source(pretty_print(t.program), ParseOptions{true}) == t.program)) {
            v.equal = false;
            v.reason = "printed transformed program does not parse back to the same tree";
            return v;
        }
    } catch (const Error& e) {
        v.equal = false;
        v.reason = std::string("printed transformed program does not parse: ") + e.what();
        return v;
    }
    RunOptions ro;
    ro.max_loop_iterations = 200'000;
    for (const auto& args : c.args) {
        DifferentialVerdict d = run_differential(p, t.program, c.catalog, args, ro);
        if (!d.equal) {
            v.equal = false;
            v.reason = "args " + arg_vectors_json({args}) + ": " + d.reason;
            return v;
        }
    }
    return v;
}

FuzzCase shrink_case(const FuzzCase& c) {
    FuzzCase best = c;
    FuzzVerdict first = check_case(c);
    if (first.equal) return best;
    std::string cls = failure_class(first.reason);
    Program p = parse_source(best.source, ParseOptions{true});
    bool progress = true;
    while (progress) {
        progress = false;
        std::vector<std::pair<BlockPath, int>> positions;
        stmt_positions(p.body, {}, positions);
        // Later positions first: deleting them never invalidates earlier paths.
        for (auto it = positions.rbegin(); it != positions.rend(); ++it) {
            Program trial = p;
            Block& b = block_at(trial.body, it->first);
            b.erase(b.begin() + it->second);
            try {
                validate_program(trial);
            } catch (const Error&) {
                continue;
            }
            FuzzCase cand = best;
            cand.source = pretty_print(trial);
            if (still_fails(cand, cls)) {
                p = std::move(trial);
                best = std::move(cand);
                progress = true;
                break;
            }
        }
    }
    for (const auto& [name, rel] : c.catalog.tables) {
        Relation cur = *best.catalog.tables.at(name);
        for (std::size_t i = cur.rows.size(); i-- > 0;) {
            Relation trial = cur;
            trial.rows.erase(trial.rows.begin() + static_cast<std::ptrdiff_t>(i));
            FuzzCase cand = best;
            cand.catalog.tables[name] = std::make_shared<const Relation>(trial);
            if (still_fails(cand, cls)) {
                cur = std::move(trial);
                best = std::move(cand);
            }
        }
    }
    return best;
}

FuzzSummary run_fuzz(std::uint64_t seed, int cases, int jobs) {
    std::vector<FuzzVerdict> verdicts(static_cast<std::size_t>(std::max(cases, 0)));
    std::atomic<int> next{0};
    auto worker = [&] {
        for (int i = next++; i < cases; i = next++) {
            FuzzCase c = generate_case(seed, static_cast<std::uint64_t>(i));
            try {
                verdicts[static_cast<std::size_t>(i)] = check_case(c);
            } catch (const std::exception& e) {
                verdicts[static_cast<std::size_t>(i)] = FuzzVerdict{false, std::string("internal: ") + e.what(), 0, 0};
            }
        }
    };
    std::vector<std::thread> pool;
    for (int j = 0; j < std::max(jobs, 1); ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();

    FuzzSummary s;
    s.cases = cases;
    for (std::size_t i = 0; i < verdicts.size(); ++i) {
        const auto& v = verdicts[i];
        s.loops_transformed += v.loops_transformed;
        s.loops_rejected += v.loops_rejected;
        if (!v.equal) {
            ++s.failures;
            s.failed.push_back({i, v});
        }
    }
    return s;
}

void write_case_bundle(const FuzzCase& c, const std::string& dir) {
    fs::create_directories(fs::path(dir) / "data");
    auto write = [&](const std::string& name, const std::string& text) {
        std::ofstream f(fs::path(dir) / name, std::ios::binary);
        f << text;
        if (!f) throw Error(ErrorKind::Io, "cannot write " + (fs::path(dir) / name).string());
    };
    // One `-- @args [..]` line per vector so the program reruns on its own.
    std::string args_lines;
    for (const auto& a : c.args) {
        std::string j = arg_vectors_json({a});
        args_lines += "-- @args " + j.substr(1, j.size() - 2) + "\n";
    }
    write("program.csl", args_lines + c.source);
    write("args.json", arg_vectors_json(c.args) + "\n");
    std::ostringstream opts;
    opts << "{\"enable_motion\": " << (c.options.enable_motion ? "true" : "false")
         << ", \"convert_for\": " << (c.options.convert_for ? "true" : "false") << ", \"naming\": \""
         << (c.options.naming == ParamNaming::Same ? "same" : "prefixed") << "\"}\n";
    write("options.json", opts.str());
    try {
        Program p = parse_source(c.source, ParseOptions{true});
        TransformResult t = transform_program(p, c.options);
        write("transformed.csl", pretty_print(t.program));
        write("report.json", transform_report_json(t) + "\n");
    } catch (const Error& e) {
        write("transform_error.txt", std::string(e.what()) + "\n");
    }
    save_catalog(c.catalog, fs::path(dir) / "data");
}

} // namespace aggify
