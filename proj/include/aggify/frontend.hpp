#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "aggify/ast.hpp"

namespace aggify {

enum class TokenKind {
    Keyword,  // text upper-cased
    Ident,
    Var,      // text keeps the leading @
    SysVar,   // @@NAME
    Int,
    Decimal,
    String,   // text holds the unescaped contents
    LParen,
    RParen,
    LBrace,
    RBrace,
    Comma,
    Semi,
    Dot,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    Plus,
    Minus,
    Star,
    Slash,
    Percent,
    End,
};

std::string_view to_string(TokenKind kind);

struct Token {
    TokenKind kind = TokenKind::End;
    std::string text;
    Span span;

    bool is_keyword(std::string_view kw) const { return kind == TokenKind::Keyword && text == kw; }
};

/// Splits source into tokens. The result always ends with one End token;
/// comments and whitespace are dropped.
std::vector<Token> tokenize(std::string_view source);

bool is_reserved_word(std::string_view upper);

struct ParseOptions {
    /// INSERT/UPDATE/DELETE against catalog tables. Rejected with
    /// UnsupportedConstruct unless admitted.
    bool admit_persistent_dml = false;
};

Program parse_program(const std::vector<Token>& tokens, ParseOptions options = {});
Program parse_source(std::string_view source, ParseOptions options = {});
Expr parse_expression(std::string_view source);
QuerySpec parse_query(std::string_view source);

/// Checks the declared-identifier, unique-parameter and fetch-arity rules.
/// Throws Error(Parse) on the first violation.
void validate_program(const Program& p);

std::string print_expr(const Expr& e);
std::string print_query(const QuerySpec& q);
std::string print_type(const TypeRef& t);
std::string print_block(const Block& b, int indent = 0);
std::string print_aggregate(const AggregateDef& a);
/// Canonical source; parse_source(pretty_print(p)) == p.
std::string pretty_print(const Program& p);

/// Projection arity of a query, or -1 when it contains a star item.
int projection_arity(const QuerySpec& q);

} // namespace aggify
