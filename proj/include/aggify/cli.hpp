#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "aggify/value.hpp"

namespace aggify {

/// Exit codes: 0 success, 1 a semantic failure (results differ, a fuzz case
/// fails), 2 usage, parse or I/O errors.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// Argument vectors as a JSON array of arrays. Integers map to INT, numbers
/// with a fraction to DECIMAL, strings to VARCHAR, booleans to BOOL.
std::vector<std::vector<Value>> parse_arg_vectors(const std::string& json_text);
std::string arg_vectors_json(const std::vector<std::vector<Value>>& args);

/// Argument vectors declared in a source file by `-- @args [..]` lines.
std::vector<std::vector<Value>> embedded_args(const std::string& source);

} // namespace aggify
