#include <algorithm>
#include <cctype>
#include <map>
#include <set>

#include "aggify/graphs.hpp"

namespace aggify {

namespace {

std::string lower(std::string s) {
    for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

bool same_cursor(const std::string& a, const std::string& b) { return lower(a) == lower(b); }

template <class T>
const T* cursor_stmt(const Stmt& s, const std::string& cursor) {
    const T* x = s.as<T>();
    return x && same_cursor(x->cursor, cursor) ? x : nullptr;
}

[[noreturn]] void malformed(const std::string& msg, Span span) { throw Error(ErrorKind::MalformedCursorUse, msg, span); }

class RegionFinder {
public:
    RegionFinder(const Program& p, const Cfg& cfg) : p_(p), cfg_(cfg) {}

    std::vector<CursorLoopRegion> run() {
        check_open_state(p_.body);
        scan(p_.body, {});
        check_stray_fetches(p_.body, false);
        return std::move(regions_);
    }

private:
    // Textual open/close tracking. A cursor still open at the end of a loop
    // body would be declared again on the next iteration.
    void check_open_state(const Block& b) {
        std::map<std::string, bool> open;
        check_open_state(b, open);
    }

    void check_open_state(const Block& b, std::map<std::string, bool>& open) {
        for (const auto& s : b) {
            if (const auto* d = s.as<CursorDeclareStmt>()) {
                if (open[lower(d->cursor)]) malformed("cursor " + d->cursor + " re-declared while open", s.span);
            } else if (const auto* o = s.as<CursorOpenStmt>()) {
                open[lower(o->cursor)] = true;
            } else if (const auto* c = s.as<CursorCloseStmt>()) {
                open[lower(c->cursor)] = false;
            } else if (const auto* dd = s.as<CursorDeallocateStmt>()) {
                open[lower(dd->cursor)] = false;
            } else if (s.as<WhileStmt>() || s.as<ForStmt>()) {
                std::map<std::string, bool> before = open;
                for (const Block* child : child_blocks(s)) check_open_state(*child, open);
                for (const auto& [name, is_open] : open) {
                    auto it = before.find(name);
                    bool was_open = it != before.end() && it->second;
                    if (is_open && !was_open) malformed("cursor " + name + " opened in a loop body and left open", s.span);
                }
            } else {
                for (const Block* child : child_blocks(s)) check_open_state(*child, open);
            }
        }
    }

    void check_stray_fetches(const Block& b, bool in_loop) {
        for (const auto& s : b) {
            if (s.as<FetchStmt>() && !in_loop && !known_fetches_.count(&s))
                malformed("FETCH outside any loop", s.span);
            bool loop = in_loop || s.as<WhileStmt>() || s.as<ForStmt>();
            for (const Block* child : child_blocks(s)) check_stray_fetches(*child, loop);
        }
    }

    void scan(const Block& b, const BlockPath& path) {
        for (std::size_t i = 0; i < b.size(); ++i) {
            const Stmt& s = b[i];
            std::size_t start = regions_.size();
            auto children = child_blocks(s);
            for (std::size_t slot = 0; slot < children.size(); ++slot) {
                BlockPath child = path;
                child.emplace_back(static_cast<int>(i), static_cast<int>(slot));
                scan(*children[slot], child);
            }
            const auto* w = s.as<WhileStmt>();
            if (!w || !w->is_fetch_loop()) continue;
            regions_.push_back(region(b, path, static_cast<int>(i), *w, s.span));
            int k = static_cast<int>(regions_.size()) - 1;
            for (std::size_t r = start; r < regions_.size() - 1; ++r)
                if (!regions_[r].enclosing) regions_[r].enclosing = k;
        }
    }

    CursorLoopRegion region(const Block& b, const BlockPath& path, int index, const WhileStmt& w, Span span) {
        CursorLoopRegion r;
        r.block = path;
        r.while_index = index;
        if (w.fetch_cursor.empty()) malformed("FETCH_STATUS loop without a FETCH in its body", span);
        r.cursor = w.fetch_cursor;
        if (w.body.empty() || !cursor_stmt<FetchStmt>(w.body.back(), r.cursor))
            malformed("the advancing FETCH must be the last statement of the loop body", span);
        const auto& advancing = *w.body.back().as<FetchStmt>();
        known_fetches_.insert(&w.body.back());

        for (int j = index - 1; j >= 0 && r.declare_index < 0; --j) {
            const Stmt& s = b[static_cast<std::size_t>(j)];
            if (cursor_stmt<FetchStmt>(s, r.cursor) && r.priming_fetch_index < 0) r.priming_fetch_index = j;
            if (cursor_stmt<CursorOpenStmt>(s, r.cursor) && r.open_index < 0) r.open_index = j;
            if (cursor_stmt<CursorDeclareStmt>(s, r.cursor)) r.declare_index = j;
        }
        if (r.declare_index < 0) malformed("cursor " + r.cursor + " is not declared in the loop's block", span);
        if (r.open_index < 0 || r.priming_fetch_index < 0 || r.open_index > r.priming_fetch_index)
            malformed("cursor " + r.cursor + " must be opened and fetched before its loop", span);
        const Stmt& decl_stmt = b[static_cast<std::size_t>(r.declare_index)];
        const Stmt& priming_stmt = b[static_cast<std::size_t>(r.priming_fetch_index)];
        const auto& priming = *priming_stmt.as<FetchStmt>();
        if (priming.vars != advancing.vars)
            malformed("priming and advancing FETCH of " + r.cursor + " target different variables", span);
        known_fetches_.insert(&priming_stmt);
        r.query = decl_stmt.as<CursorDeclareStmt>()->query;
        r.fetch_vars = advancing.vars;
        r.span = decl_stmt.span;

        for (std::size_t j = static_cast<std::size_t>(index) + 1; j < b.size(); ++j) {
            if (r.close_index < 0 && cursor_stmt<CursorCloseStmt>(b[j], r.cursor)) r.close_index = static_cast<int>(j);
            if (r.deallocate_index < 0 && cursor_stmt<CursorDeallocateStmt>(b[j], r.cursor))
                r.deallocate_index = static_cast<int>(j);
        }

        const Stmt& while_stmt = b[static_cast<std::size_t>(index)];
        r.declare_node = *cfg_.node_of(&decl_stmt);
        r.priming_fetch_node = *cfg_.node_of(&priming_stmt);
        r.header_node = *cfg_.node_of(&while_stmt);
        r.advancing_fetch_node = *cfg_.node_of(&w.body.back());
        const CfgNode& header = cfg_.node(r.header_node);
        for (int n = r.header_node; n < header.subtree_end; ++n) {
            r.loop_nodes.push_back(n);
            if (n == r.header_node || n == r.advancing_fetch_node) continue;
            const Stmt* s = cfg_.node(n).stmt;
            if (s && (cursor_stmt<FetchStmt>(*s, r.cursor) || cursor_stmt<CursorOpenStmt>(*s, r.cursor) ||
                      cursor_stmt<CursorCloseStmt>(*s, r.cursor) || cursor_stmt<CursorDeallocateStmt>(*s, r.cursor)))
                continue;
            r.body_nodes.push_back(n);
        }
        for (const auto& e : cfg_.edges)
            if (e.from == r.header_node && e.label == EdgeLabel::False) r.exit_node = e.to;

        std::set<std::string> written;
        for (int n : r.loop_nodes)
            for (const auto& d : cfg_.node(n).defs) written.insert(d.var);
        for (const auto& v : vars_of(r.query))
            if (written.count(v))
                malformed("cursor query of " + r.cursor + " reads " + v + ", which its loop writes", r.span);
        return r;
    }

    const Program& p_;
    const Cfg& cfg_;
    std::vector<CursorLoopRegion> regions_;
    std::set<const Stmt*> known_fetches_;
};

} // namespace

std::vector<CursorLoopRegion> find_cursor_loops(const Program& p, const Cfg& cfg) { return RegionFinder(p, cfg).run(); }

} // namespace aggify
