#include "aggify/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "aggify/aggify.hpp"
#include "aggify/dataflow.hpp"
#include "aggify/engine.hpp"
#include "aggify/error.hpp"
#include "aggify/frontend.hpp"
#include "aggify/fuzz.hpp"
#include "aggify/graphs.hpp"

namespace aggify {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

Value value_from_json(const json& j) {
    if (j.is_null()) return Value::null();
    if (j.is_boolean()) return Value::boolean(j.get<bool>());
    if (j.is_number_integer()) return Value::integer(j.get<std::int64_t>());
    if (j.is_number_float()) {
        auto d = Decimal::parse(j.dump());
        if (!d) throw Error(ErrorKind::Usage, "argument " + j.dump() + " is not a decimal with at most six digits");
        return Value::decimal(*d);
    }
    if (j.is_string()) return Value::varchar(j.get<std::string>());
    throw Error(ErrorKind::Usage, "unsupported argument " + j.dump());
}

json value_to_json(const Value& v) {
    if (v.is_null()) return nullptr;
    if (v.is_bool()) return v.as_bool();
    if (v.is_int()) return v.as_int();
    if (v.is_decimal()) return json::parse(v.as_decimal().to_string());
    if (v.is_varchar()) return v.as_varchar();
    return v.to_display();
}

std::vector<Value> vector_from_json(const json& j) {
    if (!j.is_array()) throw Error(ErrorKind::Usage, "an argument vector must be a JSON array");
    std::vector<Value> out;
    for (const auto& e : j) out.push_back(value_from_json(e));
    return out;
}

std::string read_file(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw Error(ErrorKind::Io, "cannot read " + p.string());
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void write_file(const fs::path& p, const std::string& text) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream f(p, std::ios::binary);
    f << text;
    if (!f) throw Error(ErrorKind::Io, "cannot write " + p.string());
}

Program parse_file(const fs::path& p) { return parse_source(read_file(p), ParseOptions{true}); }

std::string format_error(const Error& e, const std::string& file) {
    std::string where = e.span().valid() ? ":" + to_string(e.span()) : "";
    return file + where + ": " + std::string(to_string(e.kind())) + ": " + e.detail();
}

struct TransformFlags {
    bool enable_motion = false;
    bool convert_for = false;
    bool ignore_order = false;
    std::string naming = "prefixed";

    void add_to(CLI::App* app) {
        app->add_flag("--enable-motion", enable_motion, "Hoist loop-invariant expressions into the cursor query");
        app->add_flag("--convert-for", convert_for, "Turn convertible FOR loops into cursor loops first");
        app->add_option("--naming", naming, "Accumulate parameter naming for outer variables")
            ->check(CLI::IsMember({"prefixed", "same"}));
    }
    AggifyOptions options() const {
        AggifyOptions o;
        o.enable_motion = enable_motion;
        o.convert_for = convert_for;
        o.ignore_order = ignore_order;
        o.naming = naming == "same" ? ParamNaming::Same : ParamNaming::Prefixed;
        return o;
    }
};

std::vector<std::vector<Value>> load_args(const std::string& args_file, const std::string& source) {
    if (!args_file.empty()) return parse_arg_vectors(read_file(args_file));
    auto v = embedded_args(source);
    if (v.empty()) v.push_back({});
    return v;
}

std::string stats_line(const ExecStats& s) {
    return "materializations=" + std::to_string(s.cursor_materializations) +
           " materialized_rows=" + std::to_string(s.materialized_rows) +
           " rows_to_client=" + std::to_string(s.rows_moved_to_client) +
           " bytes_to_client=" + std::to_string(s.bytes_moved_to_client) +
           " accumulate_calls=" + std::to_string(s.accumulate_calls);
}

std::string clip(std::string s, std::size_t width) {
    if (s.size() >= width) s = s.substr(0, width - 4) + "...";
    return s;
}

std::string outcome_text(const Outcome& o) {
    if (o.error) return "error " + std::string(to_string(*o.error));
    if (!o.result) return "-";
    return o.result->returned ? o.result->return_value.to_literal() : "(no value)";
}

// ---- transform ----

int cmd_transform(const std::vector<std::string>& files, const std::string& out_dir, const TransformFlags& flags,
                  bool emit_cfg, bool emit_facts, std::ostream& out, std::ostream& err) {
    int rc = 0;
    for (const auto& file : files) {
        std::string source;
        Program p;
        try {
            source = read_file(file);
            p = parse_source(source, ParseOptions{true});
        } catch (const Error& e) {
            err << format_error(e, file) << "\n";
            rc = 2;
            continue;
        }
        std::string stem = fs::path(file).stem().string();
        TransformResult r = transform_program(p, flags.options());
        bool changed = !r.plans.empty() || r.for_loops_converted > 0;
        write_file(fs::path(out_dir) / (stem + ".aggified.csl"), changed ? pretty_print(r.program) : source);
        write_file(fs::path(out_dir) / (stem + ".aggify.json"), transform_report_json(r) + "\n");
        if (emit_cfg || emit_facts) {
            Cfg cfg = build_cfg(p);
            if (emit_cfg) write_file(fs::path(out_dir) / (stem + ".cfg.dot"), to_dot(cfg, build_ddg(cfg)));
            if (emit_facts) write_file(fs::path(out_dir) / (stem + ".facts.json"), facts_to_json(cfg, analyze(cfg)) + "\n");
        }
        out << file << ": " << r.plans.size() << " of " << r.loops.size() << " cursor loop(s) rewritten";
        if (r.for_loops_converted) out << ", " << r.for_loops_converted << " FOR loop(s) converted";
        out << "\n";
        for (const auto& l : r.loops) {
            out << "  " << l.cursor << " at " << to_string(l.span) << ": ";
            if (l.transformed)
                out << "rewritten as " << l.aggregate << "\n";
            else
                out << "rejected (" << to_string(l.rejection->reason) << ") " << l.rejection->detail << "\n";
        }
        for (const auto& n : r.notes) out << "  note: " << n << "\n";
    }
    return rc;
}

// ---- run ----

int cmd_run(const std::string& file, const std::string& data, const std::string& args_file, bool client_mode,
            bool aggify_first, const TransformFlags& flags, std::ostream& out) {
    std::string source = read_file(file);
    Program p = parse_source(source, ParseOptions{true});
    if (aggify_first) p = transform_program(p, flags.options()).program;
    Catalog catalog = load_catalog(data);
    RunOptions ro;
    ro.client_mode = client_mode;
    int rc = 0;
    for (const auto& args : load_args(args_file, source)) {
        std::string a = arg_vectors_json({args});
        out << "args " << a.substr(1, a.size() - 2) << "\n";
        Outcome o = run_guarded(p, catalog, args, ro);
        if (o.error) {
            out << "  error: " << to_string(*o.error) << ": " << o.error_message << "\n";
            rc = 1;
            continue;
        }
        out << "  return: " << outcome_text(o) << "\n";
        for (const auto& [name, rel] : o.result->tables) out << "  table " << name << ":\n" << relation_to_text(rel);
        out << "  stats: " << stats_line(o.result->stats) << "\n";
    }
    return rc;
}

// ---- diff ----

Catalog minimize_rows(const Program& a, const Program& b, Catalog catalog, const std::vector<Value>& args,
                      const RunOptions& ro) {
    std::vector<std::string> names;
    for (const auto& entry : catalog.tables) names.push_back(entry.first);
    for (const auto& name : names) {
        Relation cur = *catalog.tables.at(name);
        for (std::size_t i = cur.rows.size(); i-- > 0;) {
            Relation trial = cur;
            trial.rows.erase(trial.rows.begin() + static_cast<std::ptrdiff_t>(i));
            Catalog cand = catalog;
            cand.tables[name] = std::make_shared<const Relation>(trial);
            if (!run_differential(a, b, cand, args, ro).equal) {
                cur = std::move(trial);
                catalog = std::move(cand);
            }
        }
    }
    return catalog;
}

int cmd_diff(const std::string& file, const std::string& data, const std::string& args_file, bool client_mode,
             const TransformFlags& flags, const std::string& transformed_file, std::int64_t shuffle_seed,
             const std::string& out_dir, std::ostream& out) {
    std::string source = read_file(file);
    Program original = parse_source(source, ParseOptions{true});
    Program transformed;
    if (transformed_file.empty()) {
        TransformResult r = transform_program(original, flags.options());
        transformed = std::move(r.program);
        out << file << ": " << r.plans.size() << " of " << r.loops.size() << " cursor loop(s) rewritten\n";
    } else {
        transformed = parse_file(transformed_file);
        out << file << ": comparing against " << transformed_file << "\n";
    }
    Catalog catalog = load_catalog(data);
    Catalog shuffled;
    const Catalog* other = nullptr;
    if (shuffle_seed >= 0) {
        shuffled = shuffle_catalog(catalog, static_cast<std::uint64_t>(shuffle_seed));
        other = &shuffled;
    }
    RunOptions ro;
    ro.client_mode = client_mode;

    auto arg_vectors = load_args(args_file, source);
    out << std::left << std::setw(20) << "args" << std::setw(10) << "verdict" << std::setw(24) << "original"
        << std::setw(24) << "transformed" << std::setw(16) << "materialized" << "rows to client\n";
    int unequal = 0;
    std::optional<std::size_t> first_failure;
    for (std::size_t i = 0; i < arg_vectors.size(); ++i) {
        const auto& args = arg_vectors[i];
        DifferentialVerdict v = run_differential(original, transformed, catalog, args, ro, other);
        auto stat = [](const Outcome& o, auto field) {
            return o.result ? std::to_string(o.result->stats.*field) : std::string("-");
        };
        std::string mats = stat(v.original, &ExecStats::cursor_materializations) + " -> " +
                           stat(v.transformed, &ExecStats::cursor_materializations);
        std::string rows = stat(v.original, &ExecStats::rows_moved_to_client) + " -> " +
                           stat(v.transformed, &ExecStats::rows_moved_to_client);
        std::string a = arg_vectors_json({args});
        out << std::setw(20) << clip(a.substr(1, a.size() - 2), 20) << std::setw(10)
            << (v.equal ? "equal" : "DIFFERENT") << std::setw(24) << clip(outcome_text(v.original), 24) << std::setw(24)
            << clip(outcome_text(v.transformed), 24)
            << std::setw(16) << mats << rows << "\n";
        if (!v.equal) {
            out << "    " << v.reason << "\n";
            ++unequal;
            if (!first_failure) first_failure = i;
        }
    }
    out << unequal << " of " << arg_vectors.size() << " argument vector(s) differ\n";
    if (!first_failure) return 0;

    const auto& args = arg_vectors[*first_failure];
    if (other) {
        // Row order is part of the input here; keep the data as is.
        write_file(fs::path(out_dir) / "note.txt", "transformed side ran on the catalog shuffled with seed " +
                                                       std::to_string(shuffle_seed) + "\n");
        save_catalog(shuffled, fs::path(out_dir) / "data_shuffled");
        save_catalog(catalog, fs::path(out_dir) / "data");
    } else {
        save_catalog(minimize_rows(original, transformed, catalog, args, ro), fs::path(out_dir) / "data");
    }
    std::string a = arg_vectors_json({args});
    write_file(fs::path(out_dir) / "original.csl", "-- @args " + a.substr(1, a.size() - 2) + "\n" + source);
    write_file(fs::path(out_dir) / "transformed.csl", pretty_print(transformed));
    write_file(fs::path(out_dir) / "args.json", arg_vectors_json({args}) + "\n");
    out << "reproduction written to " << out_dir << "\n";
    return 1;
}

// ---- analyze ----

int cmd_analyze(const std::vector<std::string>& paths, const std::string& json_out, std::ostream& out,
                std::ostream& err) {
    std::vector<fs::path> files;
    for (const auto& p : paths) {
        if (fs::is_directory(p)) {
            for (const auto& e : fs::recursive_directory_iterator(p))
                if (e.is_regular_file() && e.path().extension() == ".csl") files.push_back(e.path());
        } else {
            files.push_back(p);
        }
    }
    std::sort(files.begin(), files.end());
    int rc = 0;
    ApplicabilityCounts total;
    json per_file = json::array();
    json reasons = json::object();
    std::size_t width = 8;
    for (const auto& f : files) width = std::max(width, f.string().size() + 2);
    const int w = static_cast<int>(width);
    out << std::left << std::setw(w) << "file" << std::setw(8) << "loops" << std::setw(8) << "cursor"
        << "aggifyable\n";
    for (const auto& f : files) {
        Program p;
        try {
            p = parse_file(f);
        } catch (const Error& e) {
            err << format_error(e, f.string()) << "\n";
            rc = 2;
            continue;
        }
        ApplicabilityCounts c = applicability(p);
        json rejected = json::array();
        for (const auto& l : c.rejected) {
            std::string reason(to_string(l.rejection->reason));
            reasons[reason] = reasons.value(reason, 0) + 1;
            rejected.push_back({{"cursor", l.cursor}, {"reason", reason}, {"detail", l.rejection->detail}});
        }
        total.while_loops += c.while_loops;
        total.cursor_loops += c.cursor_loops;
        total.aggifyable += c.aggifyable;
        out << std::setw(w) << f.string() << std::setw(8) << c.while_loops << std::setw(8) << c.cursor_loops
            << c.aggifyable << "\n";
        per_file.push_back({{"file", f.string()},
                            {"while_loops", c.while_loops},
                            {"cursor_loops", c.cursor_loops},
                            {"aggifyable", c.aggifyable},
                            {"rejected", rejected}});
    }
    out << std::setw(w) << "total" << std::setw(8) << total.while_loops << std::setw(8) << total.cursor_loops
        << total.aggifyable << "\n";
    if (!json_out.empty()) {
        json j = {{"while_loops", total.while_loops},
                  {"cursor_loops", total.cursor_loops},
                  {"aggifyable", total.aggifyable},
                  {"rejections", reasons},
                  {"files", per_file}};
        write_file(json_out, j.dump(2) + "\n");
    }
    return rc;
}

// ---- fuzz ----

int cmd_fuzz(std::uint64_t seed, int cases, int jobs, const std::string& out_dir, std::ostream& out) {
    if (jobs <= 0) jobs = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    FuzzSummary s = run_fuzz(seed, cases, jobs);
    json failed = json::array();
    for (const auto& [index, verdict] : s.failed) {
        FuzzCase shrunk = shrink_case(generate_case(seed, index));
        std::string dir = (fs::path(out_dir) / ("case_" + std::to_string(index))).string();
        write_case_bundle(shrunk, dir);
        out << "case " << index << ": " << verdict.reason << " (written to " << dir << ")\n";
        failed.push_back({{"case", index}, {"reason", verdict.reason}, {"bundle", dir}});
    }
    json j = {{"seed", seed},
              {"cases", s.cases},
              {"failures", s.failures},
              {"loops_transformed", s.loops_transformed},
              {"loops_rejected", s.loops_rejected},
              {"failed", failed}};
    write_file(fs::path(out_dir) / "summary.json", j.dump(2) + "\n");
    out << s.cases << " case(s), " << s.failures << " failure(s), " << s.loops_transformed << " loop(s) rewritten, "
        << s.loops_rejected << " rejected\n";
    return s.failures == 0 ? 0 : 1;
}

} // namespace

std::vector<std::vector<Value>> parse_arg_vectors(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw Error(ErrorKind::Usage, std::string("argument file is not JSON: ") + e.what());
    }
    if (!j.is_array()) throw Error(ErrorKind::Usage, "argument file must hold an array of arrays");
    std::vector<std::vector<Value>> out;
    for (const auto& v : j) out.push_back(vector_from_json(v));
    return out;
}

std::string arg_vectors_json(const std::vector<std::vector<Value>>& args) {
    json j = json::array();
    for (const auto& v : args) {
        json row = json::array();
        for (const auto& x : v) row.push_back(value_to_json(x));
        j.push_back(row);
    }
    return j.dump();
}

std::vector<std::vector<Value>> embedded_args(const std::string& source) {
    std::vector<std::vector<Value>> out;
    std::istringstream in(source);
    std::string line;
    static const std::string tag = "-- @args";
    while (std::getline(in, line)) {
        auto pos = line.find(tag);
        if (pos == std::string::npos) continue;
        try {
            out.push_back(vector_from_json(json::parse(line.substr(pos + tag.size()))));
        } catch (const json::exception& e) {
            throw Error(ErrorKind::Usage, "bad @args line: " + line);
        }
    }
    return out;
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Rewrites cursor loops in CSL routines into custom aggregates", "aggify"};
    app.require_subcommand(1);

    TransformFlags tflags;
    std::vector<std::string> files;
    std::string file, out_dir, data, args_file, json_out, transformed_file;
    bool emit_cfg = false, emit_facts = false, client_mode = false, aggify_first = false;
    std::int64_t shuffle_seed = -1;
    std::uint64_t seed = 42;
    int cases = 500, jobs = 0;

    auto* transform = app.add_subcommand("transform", "Rewrite cursor loops and write the result with a JSON report");
    transform->add_option("files", files, "CSL source files")->required()->check(CLI::ExistingFile);
    transform->add_option("--out", out_dir, "Output directory")->required();
    tflags.add_to(transform);
    transform->add_flag("--ignore-order", tflags.ignore_order, "Drop cursor ORDER BY instead of sorting (unsound)");
    transform->add_flag("--emit-cfg", emit_cfg, "Also write the control-flow and dependence graph as DOT");
    transform->add_flag("--emit-facts", emit_facts, "Also write the dataflow facts as JSON");

    auto* run = app.add_subcommand("run", "Interpret a routine");
    run->add_option("file", file, "CSL source file")->required()->check(CLI::ExistingFile);
    run->add_option("--data", data, "Directory of CSV tables")->required()->check(CLI::ExistingDirectory);
    run->add_option("--args", args_file, "JSON file with argument vectors")->check(CLI::ExistingFile);
    run->add_flag("--client-mode", client_mode, "Count rows and bytes moved to the client");
    run->add_flag("--aggify", aggify_first, "Run the rewritten routine instead");
    tflags.add_to(run);

    auto* diff = app.add_subcommand("diff", "Run original and rewritten routine and compare");
    diff->add_option("file", file, "CSL source file")->required()->check(CLI::ExistingFile);
    diff->add_option("--data", data, "Directory of CSV tables")->required()->check(CLI::ExistingDirectory);
    diff->add_option("--args", args_file, "JSON file with argument vectors")->check(CLI::ExistingFile);
    diff->add_option("--transformed", transformed_file, "Compare against this program instead of rewriting")
        ->check(CLI::ExistingFile);
    diff->add_option("--shuffle-seed", shuffle_seed, "Run the rewritten side on shuffled tables");
    diff->add_option("--out", out_dir, "Where a reproduction goes when results differ")
        ->default_val("aggify-repro");
    diff->add_flag("--client-mode", client_mode, "Count rows and bytes moved to the client");
    tflags.add_to(diff);
    diff->add_flag("--ignore-order", tflags.ignore_order, "Drop cursor ORDER BY instead of sorting (unsound)");

    auto* analyze_cmd = app.add_subcommand("analyze", "Count loops, cursor loops and rewritable loops");
    analyze_cmd->add_option("paths", files, "Files or directories of .csl files")->required();
    analyze_cmd->add_option("--json", json_out, "Write the counts as JSON");

    auto* fuzz = app.add_subcommand("fuzz", "Differential testing on generated programs");
    fuzz->add_option("--seed", seed, "Generator seed")->default_val(42);
    fuzz->add_option("--cases", cases, "Number of cases")->default_val(500)->check(CLI::NonNegativeNumber);
    fuzz->add_option("--jobs", jobs, "Worker threads (0: one per core)")->default_val(0);
    fuzz->add_option("--out", out_dir, "Output directory for the summary and failing cases")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp& e) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << e.what() << "\n";
        if (e.get_exit_code() == 0) return 0;
        err << "run 'aggify --help' for usage\n";
        return 2;
    }

    try {
        if (*transform) return cmd_transform(files, out_dir, tflags, emit_cfg, emit_facts, out, err);
        if (*run) return cmd_run(file, data, args_file, client_mode, aggify_first, tflags, out);
        if (*diff)
            return cmd_diff(file, data, args_file, client_mode, tflags, transformed_file, shuffle_seed, out_dir, out);
        if (*analyze_cmd) return cmd_analyze(files, json_out, out, err);
        if (*fuzz) return cmd_fuzz(seed, cases, jobs, out_dir, out);
    } catch (const Error& e) {
        err << format_error(e, file.empty() ? std::string("aggify") : file) << "\n";
        return 2;
    } catch (const fs::filesystem_error& e) {
        err << "aggify: " << e.what() << "\n";
        return 2;
    }
    return 2;
}

} // namespace aggify
