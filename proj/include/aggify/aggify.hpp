#pragma once

#include <optional>
#include <string>
#include <vector>

#include "aggify/dataflow.hpp"
#include "aggify/graphs.hpp"

namespace aggify {

/// How accumulate parameters for outer variables are named. Prefixed turns
/// @minCost into @pMinCost; Same keeps the name and the init guard reads it
/// through PARAM.@minCost.
enum class ParamNaming { Prefixed, Same };

struct AggifyOptions {
    ParamNaming naming = ParamNaming::Prefixed;
    bool enable_motion = false;
    bool convert_for = false;
    /// Drop ORDER BY without sorting inside the aggregate. Only sound when the
    /// loop body is order-insensitive; exists to show why the sort is needed.
    bool ignore_order = false;
};

enum class RejectReason { PersistentDml, UnsupportedStmt, PointlessRewrite, FetchLiveAtExit };
std::string_view to_string(RejectReason r);

struct Rejection {
    RejectReason reason = RejectReason::UnsupportedStmt;
    std::string detail;
    Span span;
};

/// The variable sets of one cursor loop, names without '@'. P_accum and
/// V_init are the loop's own sets; V_carry lists extra fields seeded from
/// the pre-loop value because they are live after the loop but assigned only
/// on some paths through the body.
struct LoopSets {
    std::vector<std::string> v_delta;
    std::vector<std::string> v_fetch;
    std::vector<std::string> v_local;
    std::vector<std::string> v_f;
    std::vector<std::string> p_accum;
    std::vector<std::string> v_init;
    std::vector<std::string> v_carry;
    std::vector<std::string> v_term;
};

enum class ParamSource { QueryAttribute, OuterVariable };

struct AccumParam {
    std::string var;   // variable it carries, with '@'
    std::string name;  // parameter name, with '@'
    TypeRef type;
    ParamSource source = ParamSource::OuterVariable;
    int column = -1;  // query column for QueryAttribute
};

struct AggregateSpec {
    std::string name;
    std::vector<Param> fields;  // V_F, isInitialized last
    std::vector<AccumParam> params;
    std::vector<std::string> init_set;  // V_init plus V_carry, with '@'
    std::vector<Expr> init_values;      // parameter read seeding each init_set field
    Block accumulate_body;              // Delta as it appears in the loop
    std::vector<std::string> terminate;  // V_term, with '@'
    bool order_sensitive = false;

    AggregateDef to_def() const;
};

struct RewritePlan {
    CursorLoopRegion region;
    LoopSets sets;
    AggregateSpec aggregate;
    QuerySpec rewritten_query;
    std::vector<std::string> result_bindings;  // locals bound from V_term, in order
    std::vector<std::string> removed_declarations;
    std::vector<std::string> hoisted;  // aliases added by code motion
};

struct LoopReport {
    std::string cursor;
    Span span;
    bool transformed = false;
    std::optional<Rejection> rejection;
    std::string aggregate;
};

struct TransformResult {
    Program program;
    std::vector<RewritePlan> plans;
    std::vector<LoopReport> loops;  // one per cursor loop, source order of decisions
    int for_loops_converted = 0;
    std::vector<std::string> notes;
};

/// Persistent-state gate plus the shape rules this rewriter needs.
std::optional<Rejection> check_applicability(const CursorLoopRegion& region, const Program& p, const Cfg& cfg,
                                             const DataflowFacts& facts);

/// V_F, P_accum, V_init, V_carry and V_term for one loop.
LoopSets compute_sets(const CursorLoopRegion& region, const Program& p, const Cfg& cfg, const DataflowFacts& facts);

AggregateSpec build_aggregate(const CursorLoopRegion& region, const LoopSets& sets, const Program& p,
                              const std::string& name, ParamNaming naming);

/// SELECT agg(...) AS aggVal FROM (Q) sub HAVING COUNT(*) > 0, with Q's ORDER
/// BY moved into a WITHIN GROUP clause of the aggregate call.
QuerySpec rewrite_query(const CursorLoopRegion& region, const AggregateSpec& agg, bool ignore_order = false);

/// Rewrites every applicable cursor loop, innermost first.
TransformResult transform_program(const Program& p, AggifyOptions options = {});

/// Loop counts of one routine: every WHILE and FOR loop, the cursor loops
/// among them, and the cursor loops transform_program rewrites.
struct ApplicabilityCounts {
    int while_loops = 0;
    int cursor_loops = 0;
    int aggifyable = 0;
    std::vector<LoopReport> rejected;
};
ApplicabilityCounts applicability(const Program& p);

/// JSON report of the computed sets and verdicts for every loop.
std::string transform_report_json(const TransformResult& r);

} // namespace aggify
