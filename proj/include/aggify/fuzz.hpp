#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "aggify/aggify.hpp"
#include "aggify/engine.hpp"

namespace aggify {

/// One generated program with its data and argument vectors.
struct FuzzCase {
    std::uint64_t seed = 0;
    std::string source;
    Catalog catalog;
    std::vector<std::vector<Value>> args;
    AggifyOptions options;
};

struct FuzzVerdict {
    bool equal = true;
    std::string reason;
    int loops_transformed = 0;
    int loops_rejected = 0;
};

/// Cursor-loop programs over small random tables (at most 50 rows). Loop
/// bodies nest at most three statements deep and use at most four
/// variables besides the fetch targets. Some cases sort on duplicate keys
/// and fold with concat; some iterate with FOR instead of a cursor.
FuzzCase generate_case(std::uint64_t seed, std::uint64_t index);

/// Transforms and runs both versions on every argument vector.
FuzzVerdict check_case(const FuzzCase& c);

/// Deletes statements, then table rows, while the case keeps failing.
FuzzCase shrink_case(const FuzzCase& c);

struct FuzzSummary {
    int cases = 0;
    int failures = 0;
    int loops_transformed = 0;
    int loops_rejected = 0;
    std::vector<std::pair<std::uint64_t, FuzzVerdict>> failed;  // by case index
};

/// Runs `cases` cases on `jobs` threads; results do not depend on `jobs`.
FuzzSummary run_fuzz(std::uint64_t seed, int cases, int jobs);

/// Writes program, transformed program, data and arguments of a case.
void write_case_bundle(const FuzzCase& c, const std::string& dir);

} // namespace aggify
