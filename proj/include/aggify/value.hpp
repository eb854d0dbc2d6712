#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace aggify {

enum class ScalarType { Int, Decimal, Varchar, Bool, Null, Record, Table };

std::string_view to_string(ScalarType type);
std::optional<ScalarType> parse_scalar_type(std::string_view name);

/// Exact fixed-point number with six fractional digits.
struct Decimal {
    static constexpr int kScale = 6;
    static constexpr std::int64_t kOne = 1'000'000;

    std::int64_t scaled = 0;

    static Decimal from_int(std::int64_t v);
    static std::optional<Decimal> parse(std::string_view text);
    std::string to_string() const;

    friend bool operator==(const Decimal&, const Decimal&) = default;
    friend auto operator<=>(const Decimal&, const Decimal&) = default;
};

struct Record;
struct Relation;

/// Runtime value. Records only come out of synthesized aggregates; tables are
/// the contents of local table variables and are shared copy-on-write.
class Value {
public:
    using Storage = std::variant<std::monostate, std::int64_t, Decimal, std::string, bool,
                                 std::shared_ptr<const Record>, std::shared_ptr<Relation>>;

    Value() = default;
    static Value null() { return Value(); }
    static Value integer(std::int64_t v) { return Value(Storage(v)); }
    static Value decimal(Decimal d) { return Value(Storage(d)); }
    static Value varchar(std::string s) { return Value(Storage(std::move(s))); }
    static Value boolean(bool b) { return Value(Storage(b)); }
    static Value record(std::shared_ptr<const Record> r) { return Value(Storage(std::move(r))); }
    static Value table(std::shared_ptr<Relation> t) { return Value(Storage(std::move(t))); }

    ScalarType type() const;
    bool is_null() const { return std::holds_alternative<std::monostate>(v_); }
    bool is_int() const { return std::holds_alternative<std::int64_t>(v_); }
    bool is_decimal() const { return std::holds_alternative<Decimal>(v_); }
    bool is_varchar() const { return std::holds_alternative<std::string>(v_); }
    bool is_bool() const { return std::holds_alternative<bool>(v_); }
    bool is_record() const { return std::holds_alternative<std::shared_ptr<const Record>>(v_); }
    bool is_table() const { return std::holds_alternative<std::shared_ptr<Relation>>(v_); }

    std::int64_t as_int() const { return std::get<std::int64_t>(v_); }
    Decimal as_decimal() const { return std::get<Decimal>(v_); }
    const std::string& as_varchar() const { return std::get<std::string>(v_); }
    bool as_bool() const { return std::get<bool>(v_); }
    const Record& as_record() const { return *std::get<std::shared_ptr<const Record>>(v_); }
    const Relation& as_table() const { return *std::get<std::shared_ptr<Relation>>(v_); }
    /// Mutable access to a table value; detaches from other holders first.
    Relation& mutable_table();

    const Storage& storage() const { return v_; }

    /// Structural equality: NULL equals NULL, tables compare row sequences.
    friend bool operator==(const Value& a, const Value& b);

    /// Human-readable rendering (NULL, 12.5, abc, true).
    std::string to_display() const;
    /// CSL literal syntax (NULL, 12.5, 'abc', TRUE).
    std::string to_literal() const;

    std::size_t hash() const;

private:
    explicit Value(Storage v) : v_(std::move(v)) {}
    Storage v_;
};

struct Record {
    std::vector<std::string> names;
    std::vector<ScalarType> types;
    std::vector<Value> values;

    friend bool operator==(const Record&, const Record&) = default;
};

struct Column {
    std::string name;
    ScalarType type = ScalarType::Null;

    friend bool operator==(const Column&, const Column&) = default;
};

using Row = std::vector<Value>;

struct Relation {
    std::vector<Column> columns;
    std::vector<Row> rows;

    std::optional<std::size_t> column_index(std::string_view name) const;
    friend bool operator==(const Relation&, const Relation&) = default;
};

/// Byte width used for data-movement accounting.
std::size_t type_width(ScalarType type);
std::size_t value_width(const Value& v, ScalarType declared);

// Arithmetic with overflow detection. NULL operands propagate NULL.
Value add(const Value& a, const Value& b);
Value subtract(const Value& a, const Value& b);
Value multiply(const Value& a, const Value& b);
Value divide(const Value& a, const Value& b);
Value modulo(const Value& a, const Value& b);
Value negate(const Value& a);

/// SQL comparison. Returns nullopt when either side is NULL (unknown).
std::optional<int> compare(const Value& a, const Value& b);
/// Total order used for sorting: NULL sorts first.
int sort_compare(const Value& a, const Value& b);

/// Convert a value to the declared type of a variable/column/parameter.
Value coerce(const Value& v, ScalarType target);

struct ValueHash {
    std::size_t operator()(const Value& v) const { return v.hash(); }
};
struct RowHash {
    std::size_t operator()(const Row& r) const;
};

} // namespace aggify
