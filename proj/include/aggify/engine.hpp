#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "aggify/ast.hpp"

namespace aggify {

/// Read-only base tables keyed by lower-case name.
struct Catalog {
    std::map<std::string, std::shared_ptr<const Relation>> tables;

    const Relation* find(std::string_view name) const;
    void add(std::string name, Relation rel);  // throws DuplicateTable
};

/// Loads every `*.csv` in `dir`. The header line is `name:TYPE,...`; an
/// empty unquoted field or the bare word NULL is a NULL value.
Catalog load_catalog(const std::filesystem::path& dir);
Relation load_csv(const std::filesystem::path& file);
void save_csv(const Relation& rel, const std::filesystem::path& file);
void save_catalog(const Catalog& catalog, const std::filesystem::path& dir);

/// Permutes the rows of every base table; the same seed gives the same order.
Catalog shuffle_catalog(const Catalog& catalog, std::uint64_t seed);

struct ExecStats {
    std::int64_t cursor_materializations = 0;
    std::int64_t materialized_rows = 0;
    std::int64_t rows_moved_to_client = 0;
    std::int64_t bytes_moved_to_client = 0;
    std::int64_t accumulate_calls = 0;

    ExecStats& operator+=(const ExecStats& o);
    friend bool operator==(const ExecStats&, const ExecStats&) = default;
    std::string to_json() const;
};

/// Hook into custom-aggregate lifecycles.
class AggregateObserver {
public:
    virtual ~AggregateObserver() = default;
    virtual void on_init(const std::string& aggregate) { (void)aggregate; }
    virtual void on_accumulate(const std::string& aggregate, const std::vector<Value>& args) {
        (void)aggregate;
        (void)args;
    }
    virtual void on_terminate(const std::string& aggregate, const Value& result) {
        (void)aggregate;
        (void)result;
    }
};

struct RunOptions {
    /// Count rows and bytes that reach the procedure from queries, as if the
    /// procedure were a remote client.
    bool client_mode = false;
    std::int64_t max_loop_iterations = 50'000'000;
    std::int64_t cte_depth_cap = 1'000'000;
    AggregateObserver* observer = nullptr;
};

struct RunResult {
    Value return_value;
    bool returned = false;
    std::map<std::string, Value> variables;  // procedure-level variables at the end
    std::map<std::string, Relation> tables;  // local table variables at the end
    ExecStats stats;
};

/// Runs a procedure. Missing trailing arguments take their declared
/// defaults. Throws Error on runtime faults.
RunResult interpret_program(const Program& p, const Catalog& catalog, const std::vector<Value>& args,
                            RunOptions options = {});

/// Evaluates a query with the given variable bindings and the aggregates of
/// `aggregates_from`.
Relation eval_query(const QuerySpec& q, const Catalog& catalog, const std::map<std::string, Value>& env,
                    const Program* aggregates_from, ExecStats& stats, RunOptions options = {});

struct Outcome {
    std::optional<RunResult> result;
    std::optional<ErrorKind> error;
    std::string error_message;
};

struct DifferentialVerdict {
    bool equal = false;
    std::string reason;
    Outcome original;
    Outcome transformed;
};

/// Runs both programs (concurrently, on separate interpreters) and compares
/// return values, local table contents and error kinds. Tables compare as
/// multisets unless the program reads the table, in which case row order
/// matters.
DifferentialVerdict run_differential(const Program& original, const Program& transformed, const Catalog& catalog,
                                     const std::vector<Value>& args, RunOptions options = {},
                                     const Catalog* transformed_catalog = nullptr);

Outcome run_guarded(const Program& p, const Catalog& catalog, const std::vector<Value>& args, RunOptions options);

/// Table variables that some query of `p` reads with FROM.
std::vector<std::string> tables_read(const Program& p);

std::string relation_to_text(const Relation& rel);

} // namespace aggify
