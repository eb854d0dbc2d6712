#pragma once

#include <set>
#include <string>
#include <vector>

#include "aggify/dataflow.hpp"
#include "aggify/graphs.hpp"

namespace aggify {

/// A pure loop-body expression that reads nothing the body writes.
struct MotionCandidate {
    const Expr* expr = nullptr;
    std::set<std::string> reads;
    std::set<std::string> writes_in_loop;  // always empty for a chosen candidate
    std::string projected_alias;
    ScalarType type = ScalarType::Bool;
};

/// Maximal hoistable subexpressions of the loop body, largest first. Pure
/// means no subquery, aggregate, PARAM reference, '/' or '%', and at least
/// one variable.
std::vector<MotionCandidate> motion_candidates(const CursorLoopRegion& region, const Program& p);

/// Moves every candidate into the cursor query's projection as a fresh
/// fetch variable (boolVal for predicates, hoistVal otherwise). Returns the
/// aliases added; an empty list leaves `p` unchanged.
std::vector<std::string> acyclic_code_motion(Program& p, const CursorLoopRegion& region);

/// Iteration space of a FOR loop as a recursive query over one column named
/// after the induction variable: the values the loop body sees, in order.
/// Throws NotConvertible when the loop does not fit the pattern.
QuerySpec for_iteration_query(const ForStmt& f, const std::string& cte_name = "iter");

/// Replaces the FOR statement at `index` of `block` with a cursor loop over
/// its iteration space. When the induction variable is read after the loop
/// its final value is restored by a follow-up assignment.
void for_to_cursor(Block& block, std::size_t index, const std::string& cursor, bool induction_live_after);

/// Converts every convertible FOR loop in the routine body. Loops that do
/// not fit are left alone and described in `notes`.
int convert_for_loops(Program& p, std::vector<std::string>* notes = nullptr);

} // namespace aggify
