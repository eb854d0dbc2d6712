#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace aggify {

/// Source position (1-based). Spans never take part in structural AST
/// equality, so two parses of differently formatted text compare equal.
struct Span {
    int line = 0;
    int column = 0;

    friend constexpr bool operator==(const Span&, const Span&) { return true; }
    bool same_position(const Span& other) const { return line == other.line && column == other.column; }
    bool valid() const { return line > 0; }
};

std::string to_string(const Span& span);

enum class ErrorKind {
    Lex,
    Parse,
    UnsupportedConstruct,
    MalformedCursorUse,
    NotConvertible,
    Schema,
    DuplicateTable,
    Type,
    Runtime,
    ArithmeticOverflow,
    UnknownAggregate,
    DepthExceeded,
    Usage,
    Io,
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, std::string message, Span span = {});

    ErrorKind kind() const noexcept { return kind_; }
    const Span& span() const noexcept { return span_; }
    const std::string& detail() const noexcept { return detail_; }

private:
    ErrorKind kind_;
    Span span_;
    std::string detail_;
};

} // namespace aggify
