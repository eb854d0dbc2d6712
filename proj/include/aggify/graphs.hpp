#pragma once

#include <optional>
#include <tuple>
#include <string>
#include <vector>

#include "aggify/ast.hpp"

namespace aggify {

enum class NodeKind { Entry, Exit, Statement, ForInit, ForCond, ForIncr };
enum class EdgeLabel { Fall, True, False, LoopBack };
enum class DefOrigin { ParamDefault, LocalInit, Assignment, Fetch, Synthetic };

std::string_view to_string(EdgeLabel label);
std::string_view to_string(DefOrigin origin);

/// A variable written by a node. Non-killing writes (a query assignment that
/// may bind no row) leave earlier definitions reaching.
struct VarDef {
    std::string var;
    DefOrigin origin = DefOrigin::Assignment;
    bool kills = true;
    bool null_init = false;  // scalar DECLARE without initializer
};

struct CfgNode {
    int id = 0;
    NodeKind kind = NodeKind::Statement;
    const Stmt* stmt = nullptr;  // null for entry and exit
    BlockPath block;             // block holding `stmt`
    int index = -1;              // position of `stmt` in that block
    int subtree_end = 0;         // one past the last node created for this statement
    std::vector<VarDef> defs;
    std::vector<std::string> uses;  // first-appearance order
    Span span;
    std::string label;
};

struct CfgEdge {
    int from = 0;
    int to = 0;
    EdgeLabel label = EdgeLabel::Fall;
    friend bool operator==(const CfgEdge&, const CfgEdge&) = default;
};

/// One statement per node. Entry defines the parameters; exit uses every
/// local table variable (the observable results of a run).
struct Cfg {
    std::vector<CfgNode> nodes;
    std::vector<CfgEdge> edges;
    std::vector<std::vector<int>> succ;
    std::vector<std::vector<int>> pred;
    int entry = 0;
    int exit = 0;

    std::size_t size() const { return nodes.size(); }
    const CfgNode& node(int id) const { return nodes[static_cast<std::size_t>(id)]; }
    /// Node created for `s` (for a FOR statement, its init node).
    std::optional<int> node_of(const Stmt* s) const;
    std::optional<EdgeLabel> edge_label(int from, int to) const;
    /// All variable names defined or used anywhere, sorted.
    std::vector<std::string> variables() const;
};

Cfg build_cfg(const Program& p);

/// Assembles a CFG from explicit parts; used by property tests.
Cfg make_cfg(std::vector<CfgNode> nodes, std::vector<CfgEdge> edges, int entry, int exit);

enum class DepKind { Flow, Anti, Output };
std::string_view to_string(DepKind kind);

struct DepEdge {
    int src = 0;
    int dst = 0;
    DepKind kind = DepKind::Flow;
    std::string variable;
    friend bool operator==(const DepEdge&, const DepEdge&) = default;
    friend auto operator<=>(const DepEdge& a, const DepEdge& b) {
        return std::tie(a.src, a.dst, a.kind, a.variable) <=> std::tie(b.src, b.dst, b.kind, b.variable);
    }
};

/// Flow, anti and output dependences, sorted and de-duplicated.
std::vector<DepEdge> build_ddg(const Cfg& cfg);

/// WHILE @@FETCH_STATUS = 0 loop over a cursor in the standard
/// DECLARE, OPEN, priming FETCH, loop, advancing FETCH shape.
struct CursorLoopRegion {
    std::string cursor;
    QuerySpec query;
    std::vector<std::string> fetch_vars;

    BlockPath block;  // block holding the DECLARE and the loop
    int declare_index = -1;
    int open_index = -1;
    int priming_fetch_index = -1;
    int while_index = -1;
    int close_index = -1;       // first CLOSE after the loop in the same block
    int deallocate_index = -1;  // first DEALLOCATE after the loop in the same block

    int declare_node = -1;
    int priming_fetch_node = -1;
    int header_node = -1;
    int advancing_fetch_node = -1;
    int exit_node = -1;  // false successor of the header
    /// Delta: loop body nodes minus FETCH/OPEN/CLOSE/DEALLOCATE of this cursor.
    std::vector<int> body_nodes;
    /// Every node of the loop: header, body and the advancing fetch.
    std::vector<int> loop_nodes;
    std::optional<int> enclosing;  // index into the returned list
    Span span;                     // of the cursor DECLARE
};

/// Regions in innermost-first order. Throws MalformedCursorUse for a FETCH
/// outside any loop, a cursor re-declared while open, a fetch loop that does
/// not follow the standard shape, or a cursor query whose inputs the loop
/// writes.
std::vector<CursorLoopRegion> find_cursor_loops(const Program& p, const Cfg& cfg);

/// CFG in DOT syntax; dependence edges are drawn dashed when given.
std::string to_dot(const Cfg& cfg, const std::vector<DepEdge>& deps = {});

} // namespace aggify
