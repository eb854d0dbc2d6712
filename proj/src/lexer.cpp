#include <algorithm>
#include <array>
#include <cctype>

#include "aggify/frontend.hpp"

namespace aggify {

namespace {

constexpr std::array kReserved = {
    "ACCUMULATE", "AGGREGATE", "ALL",     "AND",        "AS",     "ASC",    "BEGIN",     "BREAK",    "BY",
    "CATCH",      "CLOSE",     "CONTINUE", "CREATE",    "CURSOR", "DEALLOCATE", "DECLARE", "DELETE",  "DESC",
    "ELSE",       "END",       "FALSE",   "FETCH",      "FIELDS", "FOR",    "FROM",      "FUNCTION", "GROUP",
    "HAVING",     "IF",        "INIT",    "INSERT",     "INTO",   "IS",     "NEXT",      "NOT",      "NULL",
    "OPEN",       "OR",        "ORDER",   "PARAM",      "PROCEDURE", "RECURSIVE", "RETURN", "RETURNS", "SELECT",
    "SET",        "SKIP",      "TABLE",   "TERMINATE",  "TOP",    "TRUE",   "TRY",       "UNION",    "UPDATE",
    "VALUES",     "WHERE",     "WHILE",   "WITH",       "WITHIN",
};

bool ident_start(char c) { return std::isalpha(static_cast<unsigned char>(c)) || c == '_'; }
bool ident_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; }

std::string upper(std::string_view s) {
    std::string out(s);
    for (auto& c : out) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    return out;
}

class Lexer {
public:
    explicit Lexer(std::string_view src) : src_(src) {}

    std::vector<Token> run() {
        std::vector<Token> out;
        for (;;) {
            skip_trivia();
            Span start{line_, col_};
            if (pos_ >= src_.size()) {
                out.push_back(Token{TokenKind::End, "", start});
                return out;
            }
            out.push_back(next(start));
        }
    }

private:
    char peek(std::size_t ahead = 0) const { return pos_ + ahead < src_.size() ? src_[pos_ + ahead] : '\0'; }

    void advance() {
        if (src_[pos_] == '\n') {
            ++line_;
            col_ = 1;
        } else {
            ++col_;
        }
        ++pos_;
    }

    void skip_trivia() {
        for (;;) {
            if (pos_ >= src_.size()) return;
            char c = peek();
            if (std::isspace(static_cast<unsigned char>(c))) {
                advance();
            } else if (c == '-' && peek(1) == '-') {
                while (pos_ < src_.size() && peek() != '\n') advance();
            } else if (c == '/' && peek(1) == '*') {
                Span start{line_, col_};
                advance();
                advance();
                while (!(peek() == '*' && peek(1) == '/')) {
                    if (pos_ >= src_.size()) throw Error(ErrorKind::Lex, "unterminated block comment", start);
                    advance();
                }
                advance();
                advance();
            } else {
                return;
            }
        }
    }

    std::string take_while(bool (*pred)(char)) {
        std::size_t begin = pos_;
        while (pos_ < src_.size() && pred(peek())) advance();
        return std::string(src_.substr(begin, pos_ - begin));
    }

    Token next(Span start) {
        char c = peek();
        if (ident_start(c)) {
            std::string word = take_while(ident_char);
            std::string up = upper(word);
            if (is_reserved_word(up)) return Token{TokenKind::Keyword, up, start};
            return Token{TokenKind::Ident, word, start};
        }
        if (c == '@') {
            advance();
            if (peek() == '@') {
                advance();
                if (!ident_start(peek())) throw Error(ErrorKind::Lex, "expected name after @@", start);
                return Token{TokenKind::SysVar, "@@" + upper(take_while(ident_char)), start};
            }
            if (!ident_start(peek())) throw Error(ErrorKind::Lex, "expected name after @", start);
            return Token{TokenKind::Var, "@" + take_while(ident_char), start};
        }
        if (std::isdigit(static_cast<unsigned char>(c))) {
            std::string digits = take_while([](char ch) { return std::isdigit(static_cast<unsigned char>(ch)) != 0; });
            if (peek() == '.' && std::isdigit(static_cast<unsigned char>(peek(1)))) {
                advance();
                digits += "." + take_while([](char ch) { return std::isdigit(static_cast<unsigned char>(ch)) != 0; });
                return Token{TokenKind::Decimal, digits, start};
            }
            if (ident_start(peek())) throw Error(ErrorKind::Lex, "malformed number", start);
            return Token{TokenKind::Int, digits, start};
        }
        if (c == '\'') {
            advance();
            std::string text;
            for (;;) {
                if (pos_ >= src_.size()) throw Error(ErrorKind::Lex, "unterminated string literal", start);
                char ch = peek();
                advance();
                if (ch == '\'') {
                    if (peek() == '\'') {
                        text += '\'';
                        advance();
                        continue;
                    }
                    break;
                }
                text += ch;
            }
            return Token{TokenKind::String, text, start};
        }
        advance();
        switch (c) {
        case '(': return Token{TokenKind::LParen, "(", start};
        case ')': return Token{TokenKind::RParen, ")", start};
        case '{': return Token{TokenKind::LBrace, "{", start};
        case '}': return Token{TokenKind::RBrace, "}", start};
        case ',': return Token{TokenKind::Comma, ",", start};
        case ';': return Token{TokenKind::Semi, ";", start};
        case '.': return Token{TokenKind::Dot, ".", start};
        case '+': return Token{TokenKind::Plus, "+", start};
        case '-': return Token{TokenKind::Minus, "-", start};
        case '*': return Token{TokenKind::Star, "*", start};
        case '/': return Token{TokenKind::Slash, "/", start};
        case '%': return Token{TokenKind::Percent, "%", start};
        case '=': return Token{TokenKind::Eq, "=", start};
        case '!':
            if (peek() == '=') {
                advance();
                return Token{TokenKind::Ne, "!=", start};
            }
            break;
        case '<':
            if (peek() == '=') {
                advance();
                return Token{TokenKind::Le, "<=", start};
            }
            if (peek() == '>') {
                advance();
                return Token{TokenKind::Ne, "<>", start};
            }
            return Token{TokenKind::Lt, "<", start};
        case '>':
            if (peek() == '=') {
                advance();
                return Token{TokenKind::Ge, ">=", start};
            }
            return Token{TokenKind::Gt, ">", start};
        default: break;
        }
        throw Error(ErrorKind::Lex, std::string("illegal character '") + c + "'", start);
    }

    std::string_view src_;
    std::size_t pos_ = 0;
    int line_ = 1;
    int col_ = 1;
};

} // namespace

bool is_reserved_word(std::string_view up) {
    return std::find(kReserved.begin(), kReserved.end(), up) != kReserved.end();
}

std::string_view to_string(TokenKind kind) {
    switch (kind) {
    case TokenKind::Keyword: return "keyword";
    case TokenKind::Ident: return "identifier";
    case TokenKind::Var: return "variable";
    case TokenKind::SysVar: return "system variable";
    case TokenKind::Int: return "integer";
    case TokenKind::Decimal: return "decimal";
    case TokenKind::String: return "string";
    case TokenKind::LParen: return "'('";
    case TokenKind::RParen: return "')'";
    case TokenKind::LBrace: return "'{'";
    case TokenKind::RBrace: return "'}'";
    case TokenKind::Comma: return "','";
    case TokenKind::Semi: return "';'";
    case TokenKind::Dot: return "'.'";
    case TokenKind::Eq: return "'='";
    case TokenKind::Ne: return "'<>'";
    case TokenKind::Lt: return "'<'";
    case TokenKind::Le: return "'<='";
    case TokenKind::Gt: return "'>'";
    case TokenKind::Ge: return "'>='";
    case TokenKind::Plus: return "'+'";
    case TokenKind::Minus: return "'-'";
    case TokenKind::Star: return "'*'";
    case TokenKind::Slash: return "'/'";
    case TokenKind::Percent: return "'%'";
    case TokenKind::End: return "end of input";
    }
    return "token";
}

std::vector<Token> tokenize(std::string_view source) { return Lexer(source).run(); }

} // namespace aggify
