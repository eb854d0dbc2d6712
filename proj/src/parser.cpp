#include <algorithm>
#include <cctype>
#include <charconv>
#include <set>
#include <unordered_map>

#include "aggify/frontend.hpp"

namespace aggify {

namespace {

const std::vector<std::string> kBuiltinFunctions = {"abs", "concat", "coalesce", "upper"};
const std::vector<std::string> kBuiltinAggregates = {"COUNT", "SUM", "MIN", "MAX", "AVG"};

std::string lower(std::string s) {
    for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

std::string upper(std::string s) {
    for (auto& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    return s;
}

class Parser {
public:
    Parser(const std::vector<Token>& tokens, ParseOptions options) : toks_(tokens), opts_(options) {
        if (toks_.empty() || toks_.back().kind != TokenKind::End)
            throw Error(ErrorKind::Parse, "token stream must end with an end token");
    }

    Program program() {
        Program p;
        p.span = cur().span;
        while (cur().is_keyword("CREATE") && peek(1).is_keyword("AGGREGATE")) p.aggregates.push_back(aggregate_def());
        if (cur().is_keyword("CREATE")) {
            advance();
            if (accept_keyword("FUNCTION")) {
                p.kind = RoutineKind::Function;
            } else if (accept_keyword("PROCEDURE")) {
                p.kind = RoutineKind::Procedure;
            } else {
                fail("FUNCTION or PROCEDURE");
            }
            p.name = expect(TokenKind::Ident, "routine name").text;
            p.params = param_list(true);
            if (accept_keyword("RETURNS")) {
                TypeRef t = type_ref();
                if (t.is_table()) throw Error(ErrorKind::UnsupportedConstruct, "table-valued return type", prev().span);
                p.return_type = t.scalar;
            }
            accept_keyword("AS");
            p.body = block();
            accept(TokenKind::Semi);
        } else {
            p.kind = RoutineKind::Procedure;
            p.name = "main";
            while (cur().kind != TokenKind::End) statement(p.body);
        }
        if (cur().kind != TokenKind::End) fail("end of input");
        return p;
    }

    Expr standalone_expr() {
        Expr e = expr();
        if (cur().kind != TokenKind::End) fail("end of input");
        return e;
    }

    QuerySpec standalone_query() {
        QuerySpec q = query();
        accept(TokenKind::Semi);
        if (cur().kind != TokenKind::End) fail("end of input");
        return q;
    }

private:
    // ---- token helpers ----
    const Token& cur() const { return toks_[pos_]; }
    const Token& peek(std::size_t n) const { return toks_[std::min(pos_ + n, toks_.size() - 1)]; }
    const Token& prev() const { return toks_[pos_ == 0 ? 0 : pos_ - 1]; }
    void advance() {
        if (pos_ + 1 < toks_.size()) ++pos_;
    }
    bool accept(TokenKind k) {
        if (cur().kind != k) return false;
        advance();
        return true;
    }
    bool accept_keyword(std::string_view kw) {
        if (!cur().is_keyword(kw)) return false;
        advance();
        return true;
    }
    [[noreturn]] void fail(std::string_view expected) const {
        std::string got = cur().kind == TokenKind::End ? "end of input" : "'" + cur().text + "'";
        throw Error(ErrorKind::Parse, "expected " + std::string(expected) + ", got " + got, cur().span);
    }
    const Token& expect(TokenKind k, std::string_view what) {
        if (cur().kind != k) fail(what);
        advance();
        return prev();
    }
    void expect_keyword(std::string_view kw) {
        if (!accept_keyword(kw)) fail(kw);
    }
    [[noreturn]] void unsupported(std::string what, Span span) const {
        throw Error(ErrorKind::UnsupportedConstruct, std::move(what), span);
    }

    // ---- declarations ----
    TypeRef type_ref() {
        if (accept_keyword("TABLE")) {
            TypeRef t = TypeRef::of(ScalarType::Table);
            expect(TokenKind::LParen, "'('");
            do {
                std::string col = expect(TokenKind::Ident, "column name").text;
                TypeRef ct = type_ref();
                if (ct.is_table()) fail("scalar column type");
                t.table_columns.push_back(Column{col, ct.scalar});
            } while (accept(TokenKind::Comma));
            expect(TokenKind::RParen, "')'");
            return t;
        }
        const Token& name = expect(TokenKind::Ident, "type name");
        auto st = parse_scalar_type(name.text);
        if (!st) throw Error(ErrorKind::Parse, "unknown type '" + name.text + "'", name.span);
        // Length/precision arguments are accepted and ignored.
        if (accept(TokenKind::LParen)) {
            expect(TokenKind::Int, "type length");
            if (accept(TokenKind::Comma)) expect(TokenKind::Int, "type scale");
            expect(TokenKind::RParen, "')'");
        }
        return TypeRef::of(*st);
    }

    std::vector<Param> param_list(bool allow_defaults) {
        std::vector<Param> out;
        expect(TokenKind::LParen, "'('");
        if (!accept(TokenKind::RParen)) {
            do {
                Param prm;
                prm.name = expect(TokenKind::Var, "parameter").text;
                prm.type = type_ref();
                if (allow_defaults && accept(TokenKind::Eq)) prm.default_value = expr();
                out.push_back(std::move(prm));
            } while (accept(TokenKind::Comma));
            expect(TokenKind::RParen, "')'");
        }
        return out;
    }

    AggregateDef aggregate_def() {
        AggregateDef a;
        a.span = cur().span;
        expect_keyword("CREATE");
        expect_keyword("AGGREGATE");
        a.name = expect(TokenKind::Ident, "aggregate name").text;
        a.params = param_list(false);
        expect_keyword("FIELDS");
        a.fields = param_list(false);
        expect_keyword("INIT");
        a.init_body = block();
        expect_keyword("ACCUMULATE");
        a.accumulate_body = block();
        expect_keyword("TERMINATE");
        expect(TokenKind::LParen, "'('");
        do {
            a.terminate.push_back(expect(TokenKind::Var, "field").text);
        } while (accept(TokenKind::Comma));
        expect(TokenKind::RParen, "')'");
        accept(TokenKind::Semi);
        return a;
    }

    // ---- statements ----
    Block block() {
        Block b;
        if (accept_keyword("BEGIN")) {
            while (!cur().is_keyword("END")) {
                if (cur().kind == TokenKind::End) fail("END");
                statement(b);
            }
            advance();
        } else if (accept(TokenKind::LBrace)) {
            while (cur().kind != TokenKind::RBrace) {
                if (cur().kind == TokenKind::End) fail("'}'");
                statement(b);
            }
            advance();
        } else {
            fail("BEGIN or '{'");
        }
        return b;
    }

    Block body_or_statement() {
        if (cur().is_keyword("BEGIN") || cur().kind == TokenKind::LBrace) return block();
        Block b;
        statement(b);
        return b;
    }

    void end_statement() { accept(TokenKind::Semi); }

    void statement(Block& out) {
        const Token& t = cur();
        Span span = t.span;
        if (t.kind == TokenKind::Semi) {
            advance();
            return;
        }
        if (t.kind == TokenKind::Keyword) {
            const std::string& kw = t.text;
            if (kw == "BEGIN" || t.kind == TokenKind::LBrace) {
                Block inner = block();
                for (auto& s : inner) out.push_back(std::move(s));
                return;
            }
            if (kw == "DECLARE") return declare(out);
            if (kw == "SET") return out.push_back(set_stmt());
            if (kw == "IF") {
                advance();
                IfStmt s{expr(), {}, {}};
                s.then_block = body_or_statement();
                if (accept_keyword("ELSE")) s.else_block = body_or_statement();
                return out.push_back(Stmt{std::move(s), span});
            }
            if (kw == "WHILE") return out.push_back(while_stmt());
            if (kw == "FOR") return out.push_back(for_stmt());
            if (kw == "OPEN") {
                advance();
                CursorOpenStmt s{expect(TokenKind::Ident, "cursor name").text};
                end_statement();
                return out.push_back(Stmt{std::move(s), span});
            }
            if (kw == "FETCH") {
                advance();
                if (accept_keyword("NEXT")) expect_keyword("FROM");
                FetchStmt s;
                s.cursor = expect(TokenKind::Ident, "cursor name").text;
                expect_keyword("INTO");
                do {
                    s.vars.push_back(expect(TokenKind::Var, "variable").text);
                } while (accept(TokenKind::Comma));
                end_statement();
                return out.push_back(Stmt{std::move(s), span});
            }
            if (kw == "CLOSE") {
                advance();
                CursorCloseStmt s{expect(TokenKind::Ident, "cursor name").text};
                end_statement();
                return out.push_back(Stmt{std::move(s), span});
            }
            if (kw == "DEALLOCATE") {
                advance();
                CursorDeallocateStmt s{expect(TokenKind::Ident, "cursor name").text};
                end_statement();
                return out.push_back(Stmt{std::move(s), span});
            }
            if (kw == "INSERT") return out.push_back(insert_stmt());
            if (kw == "UPDATE") return out.push_back(update_stmt());
            if (kw == "DELETE") return out.push_back(delete_stmt());
            if (kw == "RETURN") {
                advance();
                ReturnStmt s;
                if (cur().kind != TokenKind::Semi && !cur().is_keyword("END") && cur().kind != TokenKind::RBrace &&
                    cur().kind != TokenKind::End)
                    s.value = expr();
                end_statement();
                return out.push_back(Stmt{std::move(s), span});
            }
            if (kw == "SKIP") {
                advance();
                end_statement();
                return out.push_back(Stmt{SkipStmt{}, span});
            }
            if (kw == "BREAK" || kw == "CONTINUE") unsupported(kw + " is not supported", span);
            if (kw == "TRY" || kw == "CATCH") unsupported("TRY/CATCH is not supported", span);
        }
        if (t.kind == TokenKind::LBrace) {
            Block inner = block();
            for (auto& s : inner) out.push_back(std::move(s));
            return;
        }
        if (t.kind == TokenKind::Ident) {
            std::string up = upper(t.text);
            if (up == "GOTO") unsupported("GOTO is not supported", span);
        }
        fail("statement");
    }

    void declare(Block& out) {
        advance();
        if (cur().kind == TokenKind::Ident && peek(1).is_keyword("CURSOR")) {
            Span span = prev().span;
            CursorDeclareStmt s;
            s.cursor = cur().text;
            advance();
            advance();
            // Cursor options such as LOCAL FAST_FORWARD carry no meaning here.
            while (cur().kind == TokenKind::Ident) advance();
            expect_keyword("FOR");
            s.query = query();
            end_statement();
            out.push_back(Stmt{std::move(s), span});
            return;
        }
        do {
            Span span = cur().span;
            DeclareStmt d;
            d.var = expect(TokenKind::Var, "variable").text;
            accept_keyword("AS");
            d.type = type_ref();
            if (accept(TokenKind::Eq)) {
                if (d.type.is_table()) fail("';'");
                d.init = expr();
            }
            out.push_back(Stmt{std::move(d), span});
        } while (accept(TokenKind::Comma));
        end_statement();
    }

    Stmt set_stmt() {
        Span span = cur().span;
        advance();
        if (accept(TokenKind::LParen)) {
            AssignQueryStmt s;
            do {
                s.vars.push_back(expect(TokenKind::Var, "variable").text);
            } while (accept(TokenKind::Comma));
            expect(TokenKind::RParen, "')'");
            expect(TokenKind::Eq, "'='");
            expect(TokenKind::LParen, "'('");
            s.query = query();
            expect(TokenKind::RParen, "')'");
            end_statement();
            return Stmt{std::move(s), span};
        }
        AssignStmt s;
        s.var = expect(TokenKind::Var, "variable").text;
        expect(TokenKind::Eq, "'='");
        s.value = expr();
        end_statement();
        return Stmt{std::move(s), span};
    }

    bool fetch_status_header() {
        std::size_t n = 0;
        bool paren = peek(0).kind == TokenKind::LParen;
        if (paren) ++n;
        if (peek(n).kind != TokenKind::SysVar || peek(n).text != "@@FETCH_STATUS") return false;
        if (peek(n + 1).kind != TokenKind::Eq || peek(n + 2).kind != TokenKind::Int || peek(n + 2).text != "0")
            unsupported("only '@@FETCH_STATUS = 0' loop headers are supported", peek(n).span);
        n += 3;
        if (paren) {
            if (peek(n).kind != TokenKind::RParen) return false;
            ++n;
        }
        pos_ += n;
        return true;
    }

    Stmt while_stmt() {
        Span span = cur().span;
        advance();
        WhileStmt s;
        if (!fetch_status_header()) s.cond = expr();
        s.body = body_or_statement();
        if (s.is_fetch_loop()) {
            for (auto it = s.body.rbegin(); it != s.body.rend(); ++it) {
                if (const auto* f = it->as<FetchStmt>()) {
                    s.fetch_cursor = f->cursor;
                    break;
                }
            }
        }
        return Stmt{std::move(s), span};
    }

    AssignStmt simple_assign() {
        AssignStmt a;
        a.var = expect(TokenKind::Var, "variable").text;
        expect(TokenKind::Eq, "'='");
        a.value = expr();
        return a;
    }

    Stmt for_stmt() {
        Span span = cur().span;
        advance();
        expect(TokenKind::LParen, "'('");
        AssignStmt init = simple_assign();
        expect(TokenKind::Semi, "';'");
        Expr cond = expr();
        expect(TokenKind::Semi, "';'");
        AssignStmt incr = simple_assign();
        expect(TokenKind::RParen, "')'");
        ForStmt s{std::move(init), std::move(cond), std::move(incr), {}};
        s.body = body_or_statement();
        return Stmt{std::move(s), span};
    }

    void admit_dml(Span span) const {
        if (!opts_.admit_persistent_dml) unsupported("DML against a persistent table", span);
    }

    std::vector<Expr> value_list() {
        std::vector<Expr> out;
        expect(TokenKind::LParen, "'('");
        do {
            out.push_back(expr());
        } while (accept(TokenKind::Comma));
        expect(TokenKind::RParen, "')'");
        return out;
    }

    Stmt insert_stmt() {
        Span span = cur().span;
        advance();
        expect_keyword("INTO");
        if (cur().kind == TokenKind::Var) {
            InsertLocalStmt s;
            s.table = cur().text;
            advance();
            expect_keyword("VALUES");
            s.values = value_list();
            end_statement();
            return Stmt{std::move(s), span};
        }
        DmlStmt s;
        s.kind = DmlKind::Insert;
        s.table = expect(TokenKind::Ident, "table name").text;
        admit_dml(span);
        expect_keyword("VALUES");
        s.values = value_list();
        end_statement();
        return Stmt{std::move(s), span};
    }

    Stmt update_stmt() {
        Span span = cur().span;
        advance();
        if (cur().kind == TokenKind::Var) unsupported("UPDATE of a table variable", span);
        DmlStmt s;
        s.kind = DmlKind::Update;
        s.table = expect(TokenKind::Ident, "table name").text;
        admit_dml(span);
        expect_keyword("SET");
        do {
            SetClause c;
            c.column = expect(TokenKind::Ident, "column name").text;
            expect(TokenKind::Eq, "'='");
            c.value = expr();
            s.assignments.push_back(std::move(c));
        } while (accept(TokenKind::Comma));
        if (accept_keyword("WHERE")) s.where = expr();
        end_statement();
        return Stmt{std::move(s), span};
    }

    Stmt delete_stmt() {
        Span span = cur().span;
        advance();
        expect_keyword("FROM");
        if (cur().kind == TokenKind::Var) unsupported("DELETE from a table variable", span);
        DmlStmt s;
        s.kind = DmlKind::Delete;
        s.table = expect(TokenKind::Ident, "table name").text;
        admit_dml(span);
        if (accept_keyword("WHERE")) s.where = expr();
        end_statement();
        return Stmt{std::move(s), span};
    }

    // ---- queries ----
    bool at_query_start() const { return cur().is_keyword("SELECT") || cur().is_keyword("WITH"); }

    QuerySpec query() {
        if (cur().is_keyword("WITH")) {
            Span span = cur().span;
            advance();
            accept_keyword("RECURSIVE");
            std::string name = expect(TokenKind::Ident, "CTE name").text;
            std::vector<std::string> cols;
            expect(TokenKind::LParen, "'('");
            do {
                cols.push_back(expect(TokenKind::Ident, "column name").text);
            } while (accept(TokenKind::Comma));
            expect(TokenKind::RParen, "')'");
            expect_keyword("AS");
            expect(TokenKind::LParen, "'('");
            QuerySpec base = select();
            expect_keyword("UNION");
            expect_keyword("ALL");
            QuerySpec rec = select();
            expect(TokenKind::RParen, "')'");
            QuerySpec main = select();
            main.span = span;
            main.cte = RecursiveCte{std::move(name), std::move(cols), Box<QuerySpec>(std::move(base)),
                                    Box<QuerySpec>(std::move(rec))};
            return main;
        }
        return select();
    }

    std::string optional_alias() {
        if (accept_keyword("AS")) return expect(TokenKind::Ident, "alias").text;
        if (cur().kind == TokenKind::Ident) {
            std::string a = cur().text;
            advance();
            return a;
        }
        return {};
    }

    QuerySpec select() {
        QuerySpec q;
        q.span = cur().span;
        expect_keyword("SELECT");
        if (accept_keyword("TOP")) {
            bool paren = accept(TokenKind::LParen);
            const Token& n = expect(TokenKind::Int, "row count");
            q.top = std::stoll(n.text);
            if (paren) expect(TokenKind::RParen, "')'");
        }
        do {
            SelectItem item;
            if (accept(TokenKind::Star)) {
                item.star = true;
            } else if (cur().kind == TokenKind::Ident && peek(1).kind == TokenKind::Dot &&
                       peek(2).kind == TokenKind::Star) {
                item.star = true;
                item.star_qualifier = cur().text;
                advance();
                advance();
                advance();
            } else {
                item.expr = expr();
                item.alias = optional_alias();
            }
            q.projections.push_back(std::move(item));
        } while (accept(TokenKind::Comma));
        if (accept_keyword("FROM")) {
            do {
                q.from.push_back(from_item());
            } while (accept(TokenKind::Comma));
        }
        if (accept_keyword("WHERE")) q.where = expr();
        if (accept_keyword("GROUP")) {
            expect_keyword("BY");
            do {
                q.group_by.push_back(expr());
            } while (accept(TokenKind::Comma));
        }
        if (accept_keyword("HAVING")) q.having = expr();
        if (accept_keyword("ORDER")) {
            expect_keyword("BY");
            q.order_by = order_items();
        }
        return q;
    }

    std::vector<OrderItem> order_items() {
        std::vector<OrderItem> out;
        do {
            OrderItem o{expr(), false};
            if (accept_keyword("DESC")) o.descending = true;
            else accept_keyword("ASC");
            out.push_back(std::move(o));
        } while (accept(TokenKind::Comma));
        return out;
    }

    FromItem from_item() {
        FromItem f;
        if (accept(TokenKind::LParen)) {
            if (!at_query_start()) fail("SELECT");
            f.subquery = Box<QuerySpec>(query());
            expect(TokenKind::RParen, "')'");
            f.alias = optional_alias();
            if (f.alias.empty()) fail("alias for derived table");
            if (accept(TokenKind::LParen)) {
                do {
                    f.column_aliases.push_back(expect(TokenKind::Ident, "column alias").text);
                } while (accept(TokenKind::Comma));
                expect(TokenKind::RParen, "')'");
            }
            return f;
        }
        if (cur().kind == TokenKind::Var) {
            f.table = cur().text;
            advance();
        } else {
            f.table = expect(TokenKind::Ident, "table name").text;
        }
        f.alias = optional_alias();
        return f;
    }

    // ---- expressions ----
    Expr expr() { return or_expr(); }

    Expr or_expr() {
        Expr lhs = and_expr();
        while (cur().is_keyword("OR")) {
            advance();
            lhs = make_binary(BinaryOp::Or, std::move(lhs), and_expr());
        }
        return lhs;
    }

    Expr and_expr() {
        Expr lhs = not_expr();
        while (cur().is_keyword("AND")) {
            advance();
            lhs = make_binary(BinaryOp::And, std::move(lhs), not_expr());
        }
        return lhs;
    }

    Expr not_expr() {
        if (cur().is_keyword("NOT")) {
            Span span = cur().span;
            advance();
            Expr e = make_unary(UnaryOp::Not, not_expr());
            e.span = span;
            return e;
        }
        return cmp_expr();
    }

    std::optional<BinaryOp> cmp_op() const {
        switch (cur().kind) {
        case TokenKind::Eq: return BinaryOp::Eq;
        case TokenKind::Ne: return BinaryOp::Ne;
        case TokenKind::Lt: return BinaryOp::Lt;
        case TokenKind::Le: return BinaryOp::Le;
        case TokenKind::Gt: return BinaryOp::Gt;
        case TokenKind::Ge: return BinaryOp::Ge;
        default: return std::nullopt;
        }
    }

    Expr cmp_expr() {
        Expr lhs = add_expr();
        for (;;) {
            if (auto op = cmp_op()) {
                advance();
                lhs = make_binary(*op, std::move(lhs), add_expr());
            } else if (cur().is_keyword("IS")) {
                advance();
                bool negated = accept_keyword("NOT");
                expect_keyword("NULL");
                lhs = make_unary(negated ? UnaryOp::IsNotNull : UnaryOp::IsNull, std::move(lhs));
            } else {
                return lhs;
            }
        }
    }

    Expr add_expr() {
        Expr lhs = mul_expr();
        for (;;) {
            if (cur().kind == TokenKind::Plus) {
                advance();
                lhs = make_binary(BinaryOp::Add, std::move(lhs), mul_expr());
            } else if (cur().kind == TokenKind::Minus) {
                advance();
                lhs = make_binary(BinaryOp::Sub, std::move(lhs), mul_expr());
            } else {
                return lhs;
            }
        }
    }

    Expr mul_expr() {
        Expr lhs = unary_expr();
        for (;;) {
            BinaryOp op;
            if (cur().kind == TokenKind::Star) op = BinaryOp::Mul;
            else if (cur().kind == TokenKind::Slash) op = BinaryOp::Div;
            else if (cur().kind == TokenKind::Percent) op = BinaryOp::Mod;
            else return lhs;
            advance();
            lhs = make_binary(op, std::move(lhs), unary_expr());
        }
    }

    Value int_literal(const std::string& text, Span span) {
        std::int64_t v = 0;
        auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
        if (ec != std::errc() || ptr != text.data() + text.size())
            throw Error(ErrorKind::Parse, "integer literal out of range", span);
        return Value::integer(v);
    }

    Value decimal_literal(const std::string& text, Span span) {
        auto d = Decimal::parse(text);
        if (!d) throw Error(ErrorKind::Parse, "decimal literal out of range", span);
        return Value::decimal(*d);
    }

    Expr unary_expr() {
        if (cur().kind == TokenKind::Minus) {
            Span span = cur().span;
            advance();
            if (cur().kind == TokenKind::Int) {
                std::string text = "-" + cur().text;
                advance();
                return make_const(int_literal(text, span), span);
            }
            if (cur().kind == TokenKind::Decimal) {
                std::string text = "-" + cur().text;
                advance();
                return make_const(decimal_literal(text, span), span);
            }
            Expr e = make_unary(UnaryOp::Neg, unary_expr());
            e.span = span;
            return e;
        }
        return primary();
    }

    Expr primary() {
        const Token& t = cur();
        Span span = t.span;
        switch (t.kind) {
        case TokenKind::Int: {
            advance();
            return make_const(int_literal(prev().text, span), span);
        }
        case TokenKind::Decimal: {
            advance();
            return make_const(decimal_literal(prev().text, span), span);
        }
        case TokenKind::String: {
            advance();
            return make_const(Value::varchar(prev().text), span);
        }
        case TokenKind::Var: {
            advance();
            return make_var(prev().text, span);
        }
        case TokenKind::SysVar:
            unsupported("system variable " + t.text + " outside a loop header", span);
        case TokenKind::LParen: {
            advance();
            if (at_query_start()) {
                QuerySpec q = query();
                expect(TokenKind::RParen, "')'");
                return Expr{SubqueryExpr{Box<QuerySpec>(std::move(q))}, span};
            }
            Expr e = expr();
            expect(TokenKind::RParen, "')'");
            return e;
        }
        case TokenKind::Keyword: {
            if (t.text == "NULL") {
                advance();
                return make_const(Value::null(), span);
            }
            if (t.text == "TRUE" || t.text == "FALSE") {
                advance();
                return make_const(Value::boolean(prev().text == "TRUE"), span);
            }
            if (t.text == "PARAM") {
                advance();
                expect(TokenKind::Dot, "'.'");
                Expr e = make_param_ref(expect(TokenKind::Var, "variable").text);
                e.span = span;
                return e;
            }
            break;
        }
        case TokenKind::Ident: return name_expr();
        default: break;
        }
        fail("expression");
    }

    Expr name_expr() {
        Span span = cur().span;
        std::string name = cur().text;
        advance();
        if (accept(TokenKind::LParen)) {
            std::string lname = lower(name);
            if (std::find(kBuiltinFunctions.begin(), kBuiltinFunctions.end(), lname) != kBuiltinFunctions.end()) {
                FuncExpr f{lname, {}};
                if (!accept(TokenKind::RParen)) {
                    f.args = comma_exprs();
                    expect(TokenKind::RParen, "')'");
                }
                return Expr{std::move(f), span};
            }
            AggregateExpr a;
            std::string uname = upper(name);
            a.name = std::find(kBuiltinAggregates.begin(), kBuiltinAggregates.end(), uname) != kBuiltinAggregates.end()
                         ? uname
                         : name;
            if (accept(TokenKind::Star)) {
                a.star = true;
                expect(TokenKind::RParen, "')'");
            } else if (!accept(TokenKind::RParen)) {
                a.args = comma_exprs();
                expect(TokenKind::RParen, "')'");
            }
            if (accept_keyword("WITHIN")) {
                expect_keyword("GROUP");
                expect(TokenKind::LParen, "'('");
                expect_keyword("ORDER");
                expect_keyword("BY");
                a.within_order = order_items();
                expect(TokenKind::RParen, "')'");
            }
            return Expr{std::move(a), span};
        }
        if (accept(TokenKind::Dot)) {
            std::string col = expect(TokenKind::Ident, "column name").text;
            Expr e = make_column(name, col);
            e.span = span;
            return e;
        }
        Expr e = make_column("", name);
        e.span = span;
        return e;
    }

    std::vector<Expr> comma_exprs() {
        std::vector<Expr> out;
        do {
            out.push_back(expr());
        } while (accept(TokenKind::Comma));
        return out;
    }

    const std::vector<Token>& toks_;
    ParseOptions opts_;
    std::size_t pos_ = 0;
};

// ---- validation ----

class Validator {
public:
    explicit Validator(std::set<std::string> declared, std::set<std::string> cursors)
        : declared_(std::move(declared)), cursors_(std::move(cursors)) {}

    void check_name(const std::string& v, Span span) const {
        if (!declared_.count(v)) throw Error(ErrorKind::Parse, "undeclared variable " + v, span);
    }

    void check_cursor(const std::string& c, Span span) const {
        if (!cursors_.count(lower(c))) throw Error(ErrorKind::Parse, "undeclared cursor " + c, span);
    }

    void procedural(const Expr& e) const {
        visit_shallow(e, [&](const Expr& x) {
            if (x.as<ColumnExpr>()) throw Error(ErrorKind::Parse, "column reference outside a query", x.span);
            if (x.as<AggregateExpr>()) throw Error(ErrorKind::Parse, "aggregate call outside a query", x.span);
        });
        for (const auto& v : vars_of(e)) check_name(v, e.span);
    }

    void query(const QuerySpec& q, Span span) const {
        for (const auto& v : vars_of(q)) check_name(v, span);
    }

    void block(const Block& b) const {
        walk_stmts(b, [&](const Stmt& s) { stmt(s); });
    }

    std::unordered_map<std::string, std::vector<int>> arities;
    std::unordered_map<std::string, int> record_widths;  // aggregate -> TERMINATE count

private:
    void stmt(const Stmt& s) const {
        std::visit(
            [&](const auto& n) {
                using T = std::decay_t<decltype(n)>;
                if constexpr (std::is_same_v<T, DeclareStmt>) {
                    if (n.init) procedural(*n.init);
                } else if constexpr (std::is_same_v<T, AssignStmt>) {
                    check_name(n.var, s.span);
                    procedural(n.value);
                } else if constexpr (std::is_same_v<T, AssignQueryStmt>) {
                    for (const auto& v : n.vars) check_name(v, s.span);
                    query(n.query, s.span);
                    int arity = projection_arity(n.query);
                    // One custom aggregate call returning a record fills every target.
                    if (arity == 1) {
                        const auto* call = n.query.projections[0].expr.template as<AggregateExpr>();
                        if (call) {
                            auto it = record_widths.find(lower(call->name));
                            if (it != record_widths.end()) arity = it->second;
                        }
                    }
                    if (arity >= 0 && arity != static_cast<int>(n.vars.size()))
                        throw Error(ErrorKind::Parse, "assignment target count differs from query arity", s.span);
                } else if constexpr (std::is_same_v<T, IfStmt>) {
                    procedural(n.cond);
                } else if constexpr (std::is_same_v<T, WhileStmt>) {
                    if (n.cond) procedural(*n.cond);
                } else if constexpr (std::is_same_v<T, ForStmt>) {
                    check_name(n.init.var, s.span);
                    check_name(n.incr.var, s.span);
                    procedural(n.init.value);
                    procedural(n.cond);
                    procedural(n.incr.value);
                } else if constexpr (std::is_same_v<T, CursorDeclareStmt>) {
                    query(n.query, s.span);
                } else if constexpr (std::is_same_v<T, CursorOpenStmt> || std::is_same_v<T, CursorCloseStmt> ||
                                     std::is_same_v<T, CursorDeallocateStmt>) {
                    check_cursor(n.cursor, s.span);
                } else if constexpr (std::is_same_v<T, FetchStmt>) {
                    check_cursor(n.cursor, s.span);
                    for (const auto& v : n.vars) check_name(v, s.span);
                    auto it = arities.find(lower(n.cursor));
                    if (it != arities.end()) {
                        for (int a : it->second)
                            if (a >= 0 && a != static_cast<int>(n.vars.size()))
                                throw Error(ErrorKind::Parse,
                                            "FETCH into " + std::to_string(n.vars.size()) +
                                                " variables from a cursor with " + std::to_string(a) + " columns",
                                            s.span);
                    }
                } else if constexpr (std::is_same_v<T, InsertLocalStmt>) {
                    check_name(n.table, s.span);
                    for (const auto& v : n.values) procedural(v);
                } else if constexpr (std::is_same_v<T, ReturnStmt>) {
                    if (n.value) procedural(*n.value);
                } else if constexpr (std::is_same_v<T, DmlStmt>) {
                    for (const auto& a : n.assignments)
                        for (const auto& v : vars_of(a.value)) check_name(v, s.span);
                    for (const auto& v : n.values) procedural(v);
                    if (n.where)
                        for (const auto& v : vars_of(*n.where)) check_name(v, s.span);
                }
            },
            s.node);
    }

    std::set<std::string> declared_;
    std::set<std::string> cursors_;
};

void collect_declarations(const Block& b, std::set<std::string>& vars, std::set<std::string>& cursors,
                          std::unordered_map<std::string, std::vector<int>>& arities) {
    walk_stmts(b, [&](const Stmt& s) {
        if (const auto* d = s.as<DeclareStmt>()) vars.insert(d->var);
        if (const auto* c = s.as<CursorDeclareStmt>()) {
            cursors.insert(lower(c->cursor));
            arities[lower(c->cursor)].push_back(projection_arity(c->query));
        }
    });
}

void check_unique(const std::vector<Param>& params, const std::string& what, Span span) {
    std::set<std::string> seen;
    for (const auto& p : params)
        if (!seen.insert(p.name).second) throw Error(ErrorKind::Parse, "duplicate " + what + " " + p.name, span);
}

} // namespace

int projection_arity(const QuerySpec& q) {
    for (const auto& p : q.projections)
        if (p.star) return -1;
    return static_cast<int>(q.projections.size());
}

void validate_program(const Program& p) {
    std::unordered_map<std::string, int> record_widths;
    for (const auto& a : p.aggregates) record_widths[lower(a.name)] = static_cast<int>(a.terminate.size());
    std::set<std::string> agg_names;
    for (const auto& a : p.aggregates) {
        if (!agg_names.insert(lower(a.name)).second)
            throw Error(ErrorKind::Parse, "duplicate aggregate " + a.name, a.span);
        check_unique(a.params, "aggregate parameter", a.span);
        check_unique(a.fields, "aggregate field", a.span);
        std::set<std::string> vars, cursors;
        std::unordered_map<std::string, std::vector<int>> arities;
        for (const auto& prm : a.params) vars.insert(prm.name);
        for (const auto& f : a.fields) vars.insert(f.name);
        collect_declarations(a.init_body, vars, cursors, arities);
        collect_declarations(a.accumulate_body, vars, cursors, arities);
        Validator v(vars, cursors);
        v.arities = arities;
        v.record_widths = record_widths;
        v.block(a.init_body);
        v.block(a.accumulate_body);
        for (const auto& t : a.terminate) {
            bool is_field = std::any_of(a.fields.begin(), a.fields.end(), [&](const Param& f) { return f.name == t; });
            if (!is_field) throw Error(ErrorKind::Parse, "TERMINATE names non-field " + t, a.span);
        }
    }
    check_unique(p.params, "parameter", p.span);
    std::set<std::string> vars, cursors;
    std::unordered_map<std::string, std::vector<int>> arities;
    for (const auto& prm : p.params) vars.insert(prm.name);
    collect_declarations(p.body, vars, cursors, arities);
    Validator v(vars, cursors);
    v.arities = arities;
    v.record_widths = record_widths;
    for (const auto& prm : p.params)
        if (prm.default_value) v.procedural(*prm.default_value);
    v.block(p.body);
}

Program parse_program(const std::vector<Token>& tokens, ParseOptions options) {
    Program p = Parser(tokens, options).program();
    validate_program(p);
    return p;
}

Program parse_source(std::string_view source, ParseOptions options) {
    return parse_program(tokenize(source), options);
}

Expr parse_expression(std::string_view source) {
    auto toks = tokenize(source);
    return Parser(toks, {}).standalone_expr();
}

QuerySpec parse_query(std::string_view source) {
    auto toks = tokenize(source);
    return Parser(toks, {}).standalone_query();
}

} // namespace aggify
