#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "aggify/error.hpp"
#include "aggify/value.hpp"

namespace aggify {

/// Deep-copying owning pointer so recursive AST nodes keep value semantics.
template <class T>
class Box {
public:
    Box(T value) : ptr_(std::make_unique<T>(std::move(value))) {}
    Box(const Box& other) : ptr_(std::make_unique<T>(*other.ptr_)) {}
    Box(Box&&) noexcept = default;
    Box& operator=(const Box& other) {
        if (this != &other) ptr_ = std::make_unique<T>(*other.ptr_);
        return *this;
    }
    Box& operator=(Box&&) noexcept = default;

    T& operator*() { return *ptr_; }
    const T& operator*() const { return *ptr_; }
    T* operator->() { return ptr_.get(); }
    const T* operator->() const { return ptr_.get(); }

    friend bool operator==(const Box& a, const Box& b) { return *a.ptr_ == *b.ptr_; }

private:
    std::unique_ptr<T> ptr_;
};

struct Expr;
struct QuerySpec;
struct OrderItem;

enum class UnaryOp { Neg, Not, IsNull, IsNotNull };
enum class BinaryOp { Add, Sub, Mul, Div, Mod, Eq, Ne, Lt, Le, Gt, Ge, And, Or };

struct ConstExpr {
    Value value;
    friend bool operator==(const ConstExpr&, const ConstExpr&) = default;
};

/// `@name`, or `PARAM.@name` inside an aggregate body where a parameter shares
/// its name with a field.
struct VarExpr {
    std::string name;
    bool param = false;
    friend bool operator==(const VarExpr&, const VarExpr&) = default;
};

struct ColumnExpr {
    std::string qualifier;
    std::string name;
    friend bool operator==(const ColumnExpr&, const ColumnExpr&) = default;
};

struct UnaryExpr {
    UnaryOp op;
    Box<Expr> operand;
    friend bool operator==(const UnaryExpr&, const UnaryExpr&) = default;
};

struct BinaryExpr {
    BinaryOp op;
    Box<Expr> lhs;
    Box<Expr> rhs;
    friend bool operator==(const BinaryExpr&, const BinaryExpr&) = default;
};

struct FuncExpr {
    std::string name;  // lower-case built-in name
    std::vector<Expr> args;
    friend bool operator==(const FuncExpr&, const FuncExpr&) = default;
};

struct SubqueryExpr {
    Box<QuerySpec> query;
    friend bool operator==(const SubqueryExpr&, const SubqueryExpr&) = default;
};

/// Built-in or user-defined aggregate call. A non-empty `within_order` makes the
/// call order-sensitive: the group is sorted on those keys and streamed into
/// the aggregate in that order.
struct AggregateExpr {
    std::string name;
    std::vector<Expr> args;
    bool star = false;
    std::vector<OrderItem> within_order;

    bool order_sensitive() const { return !within_order.empty(); }
    friend bool operator==(const AggregateExpr&, const AggregateExpr&) = default;
};

struct Expr {
    using Node = std::variant<ConstExpr, VarExpr, ColumnExpr, UnaryExpr, BinaryExpr, FuncExpr, SubqueryExpr,
                              AggregateExpr>;
    Node node;
    Span span;

    template <class T>
    const T* as() const { return std::get_if<T>(&node); }
    template <class T>
    T* as() { return std::get_if<T>(&node); }

    friend bool operator==(const Expr&, const Expr&) = default;
};

struct OrderItem {
    Expr expr;
    bool descending = false;
    friend bool operator==(const OrderItem&, const OrderItem&) = default;
};

struct SelectItem {
    Expr expr;
    std::string alias;
    bool star = false;
    std::string star_qualifier;
    friend bool operator==(const SelectItem&, const SelectItem&) = default;
};

struct FromItem {
    std::string table;  // catalog table, CTE name, or `@local` table variable
    std::optional<Box<QuerySpec>> subquery;
    std::string alias;
    std::vector<std::string> column_aliases;

    std::string effective_name() const { return alias.empty() ? table : alias; }
    friend bool operator==(const FromItem&, const FromItem&) = default;
};

struct RecursiveCte {
    std::string name;
    std::vector<std::string> columns;
    Box<QuerySpec> base;
    Box<QuerySpec> recursive;
    friend bool operator==(const RecursiveCte&, const RecursiveCte&) = default;
};

struct QuerySpec {
    std::optional<RecursiveCte> cte;
    std::optional<std::int64_t> top;
    std::vector<SelectItem> projections;
    std::vector<FromItem> from;
    std::optional<Expr> where;
    std::vector<Expr> group_by;
    std::optional<Expr> having;
    std::vector<OrderItem> order_by;
    Span span;

    friend bool operator==(const QuerySpec&, const QuerySpec&) = default;
};

struct TypeRef {
    ScalarType scalar = ScalarType::Int;
    std::vector<Column> table_columns;  // only for ScalarType::Table

    bool is_table() const { return scalar == ScalarType::Table; }
    static TypeRef of(ScalarType t) { return TypeRef{t, {}}; }
    friend bool operator==(const TypeRef&, const TypeRef&) = default;
};

struct Stmt;
using Block = std::vector<Stmt>;

struct DeclareStmt {
    std::string var;
    TypeRef type;
    std::optional<Expr> init;
    friend bool operator==(const DeclareStmt&, const DeclareStmt&) = default;
};

struct AssignStmt {
    std::string var;
    Expr value;
    friend bool operator==(const AssignStmt&, const AssignStmt&) = default;
};

/// `SET (@a, @b) = (SELECT ...)`: binds the single result row; a result with
/// no rows leaves the targets unchanged.
struct AssignQueryStmt {
    std::vector<std::string> vars;
    QuerySpec query;
    friend bool operator==(const AssignQueryStmt&, const AssignQueryStmt&) = default;
};

struct IfStmt {
    Expr cond;
    Block then_block;
    Block else_block;
    friend bool operator==(const IfStmt&, const IfStmt&) = default;
};

/// Either an ordinary `WHILE cond` loop or the idiomatic
/// `WHILE @@FETCH_STATUS = 0` loop, recorded with the cursor it tests.
struct WhileStmt {
    std::optional<Expr> cond;
    std::string fetch_cursor;
    Block body;

    bool is_fetch_loop() const { return !cond.has_value(); }
    friend bool operator==(const WhileStmt&, const WhileStmt&) = default;
};

struct ForStmt {
    AssignStmt init;
    Expr cond;
    AssignStmt incr;
    Block body;
    friend bool operator==(const ForStmt&, const ForStmt&) = default;
};

struct CursorDeclareStmt {
    std::string cursor;
    QuerySpec query;
    friend bool operator==(const CursorDeclareStmt&, const CursorDeclareStmt&) = default;
};

struct CursorOpenStmt {
    std::string cursor;
    friend bool operator==(const CursorOpenStmt&, const CursorOpenStmt&) = default;
};

struct FetchStmt {
    std::string cursor;
    std::vector<std::string> vars;
    friend bool operator==(const FetchStmt&, const FetchStmt&) = default;
};

struct CursorCloseStmt {
    std::string cursor;
    friend bool operator==(const CursorCloseStmt&, const CursorCloseStmt&) = default;
};

struct CursorDeallocateStmt {
    std::string cursor;
    friend bool operator==(const CursorDeallocateStmt&, const CursorDeallocateStmt&) = default;
};

struct InsertLocalStmt {
    std::string table;
    std::vector<Expr> values;
    friend bool operator==(const InsertLocalStmt&, const InsertLocalStmt&) = default;
};

struct ReturnStmt {
    std::optional<Expr> value;
    friend bool operator==(const ReturnStmt&, const ReturnStmt&) = default;
};

struct SkipStmt {
    friend bool operator==(const SkipStmt&, const SkipStmt&) = default;
};

enum class DmlKind { Insert, Update, Delete };

struct SetClause {
    std::string column;
    Expr value;
    friend bool operator==(const SetClause&, const SetClause&) = default;
};

/// DML against a catalog (persistent) table. Parsed only when the caller admits
/// it; cursor loops containing it are never rewritten.
struct DmlStmt {
    DmlKind kind = DmlKind::Insert;
    std::string table;
    std::vector<SetClause> assignments;
    std::vector<Expr> values;
    std::optional<Expr> where;
    friend bool operator==(const DmlStmt&, const DmlStmt&) = default;
};

struct Stmt {
    using Node = std::variant<DeclareStmt, AssignStmt, AssignQueryStmt, IfStmt, WhileStmt, ForStmt, CursorDeclareStmt,
                              CursorOpenStmt, FetchStmt, CursorCloseStmt, CursorDeallocateStmt, InsertLocalStmt,
                              ReturnStmt, SkipStmt, DmlStmt>;
    Node node;
    Span span;

    template <class T>
    const T* as() const { return std::get_if<T>(&node); }
    template <class T>
    T* as() { return std::get_if<T>(&node); }

    friend bool operator==(const Stmt&, const Stmt&) = default;
};

struct Param {
    std::string name;
    TypeRef type;
    std::optional<Expr> default_value;
    friend bool operator==(const Param&, const Param&) = default;
};

/// A custom aggregate in Init/Accumulate/Terminate form. Terminate returns
/// the listed fields: a scalar for one field, a record otherwise.
struct AggregateDef {
    std::string name;
    std::vector<Param> params;
    std::vector<Param> fields;
    Block init_body;
    Block accumulate_body;
    std::vector<std::string> terminate;
    Span span;

    friend bool operator==(const AggregateDef&, const AggregateDef&) = default;
};

enum class RoutineKind { Function, Procedure };

struct Program {
    std::vector<AggregateDef> aggregates;
    RoutineKind kind = RoutineKind::Function;
    std::string name;
    std::vector<Param> params;
    std::optional<ScalarType> return_type;
    Block body;
    Span span;

    friend bool operator==(const Program&, const Program&) = default;
};

// ---- construction helpers ----

Expr make_const(Value v, Span span = {});
Expr make_var(std::string name, Span span = {});
Expr make_param_ref(std::string name);
Expr make_column(std::string qualifier, std::string name);
Expr make_unary(UnaryOp op, Expr operand);
Expr make_binary(BinaryOp op, Expr lhs, Expr rhs);
Stmt make_stmt(Stmt::Node node, Span span = {});

// ---- traversal helpers ----

/// Pre-order visit of `e` and its sub-expressions, not descending into
/// subqueries.
void visit_shallow(const Expr& e, const std::function<void(const Expr&)>& fn);
/// Mutable post-order rewrite of every sub-expression (not into subqueries).
void rewrite_shallow(Expr& e, const std::function<void(Expr&)>& fn);

/// Variables referenced by an expression, including those inside subqueries,
/// in order of first appearance (duplicates kept out).
void collect_vars(const Expr& e, std::vector<std::string>& out);
void collect_vars(const QuerySpec& q, std::vector<std::string>& out);
std::vector<std::string> vars_of(const Expr& e);
std::vector<std::string> vars_of(const QuerySpec& q);

/// Rename every reference to variable `from` (in expressions and queries).
void rename_var(Expr& e, const std::string& from, const std::string& to);
void rename_var(QuerySpec& q, const std::string& from, const std::string& to);

bool contains_subquery(const Expr& e);
bool contains_aggregate(const Expr& e);

/// Child blocks of a compound statement (If: then, else; While/For: body).
std::vector<const Block*> child_blocks(const Stmt& s);
std::vector<Block*> child_blocks(Stmt& s);

/// Pre-order walk over every statement in a block tree.
void walk_stmts(const Block& b, const std::function<void(const Stmt&)>& fn);

/// Every variable referenced anywhere in a block tree (reads and writes).
std::vector<std::string> referenced_vars(const Block& b);

/// Variables a block tree may write: assignment, query-assignment and FETCH
/// targets, declarations, local-table inserts and FOR induction variables.
std::vector<std::string> written_vars(const Block& b);

/// Declared type of every parameter and DECLAREd variable of the routine
/// body; the first declaration wins.
std::map<std::string, TypeRef> declared_types(const Program& p);
/// Parameters, then DECLAREd variables in pre-order.
std::vector<std::string> declaration_order(const Program& p);

/// Static result type of a scalar expression, when the operand types make
/// it certain.
std::optional<ScalarType> infer_type(const Expr& e, const std::map<std::string, TypeRef>& vars);

/// Position of a block inside a program body: each step is
/// (statement index, child-block slot).
using BlockPath = std::vector<std::pair<int, int>>;
Block& block_at(Block& root, const BlockPath& path);
const Block& block_at(const Block& root, const BlockPath& path);

std::string_view to_string(BinaryOp op);

} // namespace aggify
