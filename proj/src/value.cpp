#include "aggify/value.hpp"

#include <algorithm>
#include <charconv>
#include <functional>

#include "aggify/error.hpp"

namespace aggify {

namespace {

using i128 = __int128;

[[noreturn]] void overflow(const char* op) {
    throw Error(ErrorKind::ArithmeticOverflow, std::string("arithmetic overflow in ") + op);
}

std::int64_t narrow(i128 v, const char* op) {
    if (v > static_cast<i128>(INT64_MAX) || v < static_cast<i128>(INT64_MIN)) overflow(op);
    return static_cast<std::int64_t>(v);
}

// Division rounding half away from zero.
i128 round_div(i128 num, i128 den) {
    i128 q = num / den;
    i128 r = num % den;
    i128 twice = (r < 0 ? -r : r) * 2;
    i128 aden = den < 0 ? -den : den;
    if (twice >= aden) q += ((num < 0) != (den < 0)) ? -1 : 1;
    return q;
}

bool numeric(const Value& v) { return v.is_int() || v.is_decimal(); }

std::int64_t scaled_of(const Value& v) {
    if (v.is_decimal()) return v.as_decimal().scaled;
    return narrow(static_cast<i128>(v.as_int()) * Decimal::kOne, "decimal conversion");
}

[[noreturn]] void type_fault(const char* op, const Value& a, const Value& b) {
    throw Error(ErrorKind::Type, std::string("operator ") + op + " not defined for " +
                                     std::string(to_string(a.type())) + " and " +
                                     std::string(to_string(b.type())));
}

} // namespace

std::string_view to_string(ScalarType type) {
    switch (type) {
    case ScalarType::Int: return "INT";
    case ScalarType::Decimal: return "DECIMAL";
    case ScalarType::Varchar: return "VARCHAR";
    case ScalarType::Bool: return "BOOL";
    case ScalarType::Null: return "NULL";
    case ScalarType::Record: return "RECORD";
    case ScalarType::Table: return "TABLE";
    }
    return "?";
}

std::optional<ScalarType> parse_scalar_type(std::string_view name) {
    std::string upper(name);
    std::transform(upper.begin(), upper.end(), upper.begin(), [](unsigned char c) { return std::toupper(c); });
    if (upper == "INT" || upper == "INTEGER" || upper == "BIGINT") return ScalarType::Int;
    if (upper == "DECIMAL" || upper == "NUMERIC") return ScalarType::Decimal;
    if (upper == "VARCHAR" || upper == "CHAR" || upper == "NVARCHAR") return ScalarType::Varchar;
    if (upper == "BOOL" || upper == "BOOLEAN" || upper == "BIT") return ScalarType::Bool;
    return std::nullopt;
}

Decimal Decimal::from_int(std::int64_t v) {
    return Decimal{narrow(static_cast<i128>(v) * kOne, "decimal conversion")};
}

std::optional<Decimal> Decimal::parse(std::string_view text) {
    if (text.empty()) return std::nullopt;
    bool negative = false;
    std::size_t i = 0;
    if (text[0] == '-' || text[0] == '+') {
        negative = text[0] == '-';
        i = 1;
    }
    i128 whole = 0;
    bool any_digit = false;
    for (; i < text.size() && text[i] != '.'; ++i) {
        if (!std::isdigit(static_cast<unsigned char>(text[i]))) return std::nullopt;
        whole = whole * 10 + (text[i] - '0');
        any_digit = true;
        if (whole > static_cast<i128>(INT64_MAX)) return std::nullopt;
    }
    i128 frac = 0;
    int digits = 0;
    if (i < text.size()) {
        ++i;
        for (; i < text.size(); ++i) {
            if (!std::isdigit(static_cast<unsigned char>(text[i]))) return std::nullopt;
            if (digits == kScale) return std::nullopt;
            frac = frac * 10 + (text[i] - '0');
            ++digits;
            any_digit = true;
        }
    }
    if (!any_digit) return std::nullopt;
    for (; digits < kScale; ++digits) frac *= 10;
    i128 total = whole * kOne + frac;
    if (negative) total = -total;
    if (total > static_cast<i128>(INT64_MAX) || total < static_cast<i128>(INT64_MIN)) return std::nullopt;
    return Decimal{static_cast<std::int64_t>(total)};
}

std::string Decimal::to_string() const {
    i128 v = scaled;
    bool negative = v < 0;
    if (negative) v = -v;
    auto whole = static_cast<unsigned long long>(v / kOne);
    auto frac = static_cast<unsigned long long>(v % kOne);
    std::string f = std::to_string(frac);
    f.insert(0, static_cast<std::size_t>(kScale) - f.size(), '0');
    while (f.size() > 1 && f.back() == '0') f.pop_back();
    return (negative ? "-" : "") + std::to_string(whole) + "." + f;
}

ScalarType Value::type() const {
    switch (v_.index()) {
    case 0: return ScalarType::Null;
    case 1: return ScalarType::Int;
    case 2: return ScalarType::Decimal;
    case 3: return ScalarType::Varchar;
    case 4: return ScalarType::Bool;
    case 5: return ScalarType::Record;
    default: return ScalarType::Table;
    }
}

Relation& Value::mutable_table() {
    auto& ptr = std::get<std::shared_ptr<Relation>>(v_);
    if (ptr.use_count() != 1) ptr = std::make_shared<Relation>(*ptr);
    return *ptr;
}

bool operator==(const Value& a, const Value& b) {
    if (a.v_.index() != b.v_.index()) return false;
    if (a.is_record()) return a.as_record() == b.as_record();
    if (a.is_table()) return a.as_table() == b.as_table();
    return a.v_ == b.v_;
}

std::string Value::to_display() const {
    switch (type()) {
    case ScalarType::Null: return "NULL";
    case ScalarType::Int: return std::to_string(as_int());
    case ScalarType::Decimal: return as_decimal().to_string();
    case ScalarType::Varchar: return as_varchar();
    case ScalarType::Bool: return as_bool() ? "true" : "false";
    case ScalarType::Record: {
        std::string out = "(";
        const auto& r = as_record();
        for (std::size_t i = 0; i < r.values.size(); ++i) {
            if (i) out += ", ";
            out += r.names[i] + "=" + r.values[i].to_display();
        }
        return out + ")";
    }
    case ScalarType::Table: return "<table of " + std::to_string(as_table().rows.size()) + " rows>";
    }
    return "?";
}

std::string Value::to_literal() const {
    switch (type()) {
    case ScalarType::Null: return "NULL";
    case ScalarType::Bool: return as_bool() ? "TRUE" : "FALSE";
    case ScalarType::Varchar: {
        std::string out = "'";
        for (char c : as_varchar()) {
            out += c;
            if (c == '\'') out += '\'';
        }
        return out + "'";
    }
    default: return to_display();
    }
}

std::size_t Value::hash() const {
    std::size_t seed = v_.index();
    auto mix = [&seed](std::size_t h) { seed ^= h + 0x9e3779b97f4a7c15ULL + (seed << 6) + (seed >> 2); };
    switch (type()) {
    case ScalarType::Int: mix(std::hash<std::int64_t>{}(as_int())); break;
    case ScalarType::Decimal: mix(std::hash<std::int64_t>{}(as_decimal().scaled)); break;
    case ScalarType::Varchar: mix(std::hash<std::string>{}(as_varchar())); break;
    case ScalarType::Bool: mix(as_bool() ? 1 : 2); break;
    case ScalarType::Record:
        for (const auto& v : as_record().values) mix(v.hash());
        break;
    case ScalarType::Table: mix(as_table().rows.size()); break;
    case ScalarType::Null: break;
    }
    return seed;
}

std::size_t RowHash::operator()(const Row& r) const {
    std::size_t seed = r.size();
    for (const auto& v : r) seed ^= v.hash() + 0x9e3779b97f4a7c15ULL + (seed << 6) + (seed >> 2);
    return seed;
}

std::optional<std::size_t> Relation::column_index(std::string_view name) const {
    for (std::size_t i = 0; i < columns.size(); ++i) {
        const auto& c = columns[i].name;
        if (c.size() == name.size() &&
            std::equal(c.begin(), c.end(), name.begin(), [](char x, char y) {
                return std::tolower(static_cast<unsigned char>(x)) == std::tolower(static_cast<unsigned char>(y));
            }))
            return i;
    }
    return std::nullopt;
}

std::size_t type_width(ScalarType type) {
    switch (type) {
    case ScalarType::Int: return 4;
    case ScalarType::Decimal: return 9;
    case ScalarType::Varchar: return 25;
    case ScalarType::Bool: return 1;
    default: return 0;
    }
}

std::size_t value_width(const Value& v, ScalarType declared) {
    if (v.is_record()) {
        std::size_t total = 0;
        const auto& r = v.as_record();
        for (std::size_t i = 0; i < r.values.size(); ++i) total += value_width(r.values[i], r.types[i]);
        return total;
    }
    if (declared != ScalarType::Null) return type_width(declared);
    return type_width(v.type());
}

Value add(const Value& a, const Value& b) {
    if (a.is_null() || b.is_null()) return Value::null();
    if (a.is_varchar() && b.is_varchar()) return Value::varchar(a.as_varchar() + b.as_varchar());
    if (!numeric(a) || !numeric(b)) type_fault("+", a, b);
    if (a.is_int() && b.is_int()) return Value::integer(narrow(static_cast<i128>(a.as_int()) + b.as_int(), "+"));
    return Value::decimal(Decimal{narrow(static_cast<i128>(scaled_of(a)) + scaled_of(b), "+")});
}

Value subtract(const Value& a, const Value& b) {
    if (a.is_null() || b.is_null()) return Value::null();
    if (!numeric(a) || !numeric(b)) type_fault("-", a, b);
    if (a.is_int() && b.is_int()) return Value::integer(narrow(static_cast<i128>(a.as_int()) - b.as_int(), "-"));
    return Value::decimal(Decimal{narrow(static_cast<i128>(scaled_of(a)) - scaled_of(b), "-")});
}

Value multiply(const Value& a, const Value& b) {
    if (a.is_null() || b.is_null()) return Value::null();
    if (!numeric(a) || !numeric(b)) type_fault("*", a, b);
    if (a.is_int() && b.is_int()) return Value::integer(narrow(static_cast<i128>(a.as_int()) * b.as_int(), "*"));
    i128 product = static_cast<i128>(scaled_of(a)) * scaled_of(b);
    return Value::decimal(Decimal{narrow(round_div(product, Decimal::kOne), "*")});
}

Value divide(const Value& a, const Value& b) {
    if (a.is_null() || b.is_null()) return Value::null();
    if (!numeric(a) || !numeric(b)) type_fault("/", a, b);
    if (a.is_int() && b.is_int()) {
        if (b.as_int() == 0) throw Error(ErrorKind::Runtime, "division by zero");
        return Value::integer(narrow(static_cast<i128>(a.as_int()) / b.as_int(), "/"));
    }
    std::int64_t den = scaled_of(b);
    if (den == 0) throw Error(ErrorKind::Runtime, "division by zero");
    return Value::decimal(Decimal{narrow(round_div(static_cast<i128>(scaled_of(a)) * Decimal::kOne, den), "/")});
}

Value modulo(const Value& a, const Value& b) {
    if (a.is_null() || b.is_null()) return Value::null();
    if (!a.is_int() || !b.is_int()) type_fault("%", a, b);
    if (b.as_int() == 0) throw Error(ErrorKind::Runtime, "division by zero");
    return Value::integer(narrow(static_cast<i128>(a.as_int()) % b.as_int(), "%"));
}

Value negate(const Value& a) {
    if (a.is_null()) return a;
    if (a.is_int()) return Value::integer(narrow(-static_cast<i128>(a.as_int()), "unary -"));
    if (a.is_decimal()) return Value::decimal(Decimal{narrow(-static_cast<i128>(a.as_decimal().scaled), "unary -")});
    throw Error(ErrorKind::Type, "unary - not defined for " + std::string(to_string(a.type())));
}

std::optional<int> compare(const Value& a, const Value& b) {
    if (a.is_null() || b.is_null()) return std::nullopt;
    auto sign = [](auto x, auto y) { return x < y ? -1 : (y < x ? 1 : 0); };
    if (numeric(a) && numeric(b)) {
        if (a.is_int() && b.is_int()) return sign(a.as_int(), b.as_int());
        return sign(scaled_of(a), scaled_of(b));
    }
    if (a.is_varchar() && b.is_varchar()) return sign(a.as_varchar().compare(b.as_varchar()), 0);
    if (a.is_bool() && b.is_bool()) return sign(int(a.as_bool()), int(b.as_bool()));
    type_fault("comparison", a, b);
}

int sort_compare(const Value& a, const Value& b) {
    if (a.is_null() || b.is_null()) return int(!a.is_null()) - int(!b.is_null());
    return *compare(a, b);
}

Value coerce(const Value& v, ScalarType target) {
    if (v.is_null() || target == ScalarType::Null) return v;
    ScalarType actual = v.type();
    if (actual == target) return v;
    if (actual == ScalarType::Int && target == ScalarType::Decimal) return Value::decimal(Decimal::from_int(v.as_int()));
    // Narrowing truncates toward zero.
    if (actual == ScalarType::Decimal && target == ScalarType::Int) return Value::integer(v.as_decimal().scaled / Decimal::kOne);
    throw Error(ErrorKind::Type, "cannot assign " + std::string(to_string(actual)) + " value to " +
                                     std::string(to_string(target)));
}

} // namespace aggify
