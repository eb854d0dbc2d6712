#include <doctest.h>

#include <algorithm>

#include "aggify/dataflow.hpp"
#include "aggify/frontend.hpp"
#include "../support/support.hpp"

using namespace aggify;

namespace {

Program routine(const std::string& body, const std::string& params = "") {
    return parse_source("CREATE FUNCTION f(" + params + ") RETURNS INT AS BEGIN\n" + body + "\nEND");
}

int find_node(const Cfg& cfg, const std::string& prefix) {
    for (const auto& n : cfg.nodes)
        if (n.label.rfind(prefix, 0) == 0) return n.id;
    FAIL("no node labelled " << prefix);
    return -1;
}

std::vector<int> def_nodes(const DataflowFacts& f, const std::vector<int>& ids) {
    std::vector<int> out;
    for (int id : ids) out.push_back(f.def(id).node);
    std::sort(out.begin(), out.end());
    return out;
}

} // namespace

TEST_CASE("lower bound use sees the default and the reassignment") {
    Program p = testsupport::parse_fixture("min_cost_supp.csl");
    Cfg cfg = build_cfg(p);
    DataflowFacts f = analyze(cfg);
    int use = find_node(cfg, "IF @pCost < @minCost");
    int reassign = find_node(cfg, "SET @lb");
    auto defs = f.ud.at(UseSite{use, "@lb"});
    CHECK(def_nodes(f, defs) == std::vector<int>{cfg.entry, reassign});
    bool has_default = false;
    for (int d : defs) has_default = has_default || f.def(d).origin == DefOrigin::ParamDefault;
    CHECK(has_default);

    // The du chain of the reassignment reaches the in-loop use.
    int reassign_def = -1;
    for (const auto& d : f.defs)
        if (d.node == reassign) reassign_def = d.id;
    const auto& uses = f.du.at(reassign_def);
    CHECK(std::find(uses.begin(), uses.end(), UseSite{use, "@lb"}) != uses.end());
}

TEST_CASE("liveness around the cursor loop") {
    Program p = testsupport::parse_fixture("min_cost_supp.csl");
    Cfg cfg = build_cfg(p);
    DataflowFacts f = analyze(cfg);
    int header = find_node(cfg, "WHILE");
    int exit_node = find_node(cfg, "CLOSE c1");
    CHECK(f.live_in[static_cast<std::size_t>(exit_node)] == std::set<std::string>{"@suppName"});
    // @lb is read on every iteration and dead once the loop is done.
    for (int n = header; n < exit_node; ++n) CHECK(f.live_at_entry(n, "@lb"));
    CHECK_FALSE(f.live_at_entry(exit_node, "@lb"));
}

TEST_CASE("single assignment then use has exactly one reaching definition") {
    Program p = routine("DECLARE @x INT; SET @x = 4; RETURN @x;");
    Cfg cfg = build_cfg(p);
    DataflowFacts f = analyze(cfg);
    int ret = find_node(cfg, "RETURN");
    auto defs = f.ud.at(UseSite{ret, "@x"});
    REQUIRE(defs.size() == 1);
    CHECK(f.def(defs[0]).node == find_node(cfg, "SET @x"));
}

TEST_CASE("definitions from both arms of a diamond reach the join") {
    Program p = routine("DECLARE @x INT; IF @a > 0 SET @x = 1; ELSE SET @x = 2; RETURN @x;", "@a INT");
    Cfg cfg = build_cfg(p);
    CHECK(testsupport::check_against_oracle(cfg).empty());
    DataflowFacts f = analyze(cfg);
    auto defs = f.ud.at(UseSite{find_node(cfg, "RETURN"), "@x"});
    CHECK(def_nodes(f, defs) == std::vector<int>{find_node(cfg, "SET @x = 1"), find_node(cfg, "SET @x = 2")});
}

TEST_CASE("a value assigned and never read is not live") {
    Program p = routine("DECLARE @x INT; DECLARE @y INT = 3; SET @x = @y; RETURN @y;");
    Cfg cfg = build_cfg(p);
    DataflowFacts f = analyze(cfg);
    for (std::size_t n = 0; n < cfg.size(); ++n) CHECK(f.live_out[n].count("@x") == 0);
}

TEST_CASE("code after RETURN is unreachable and has empty chains") {
    Program p = routine("DECLARE @x INT = 1; RETURN @x; SET @x = @x + 1;");
    Cfg cfg = build_cfg(p);
    CHECK(testsupport::check_against_oracle(cfg).empty());
    DataflowFacts f = analyze(cfg);
    int dead = find_node(cfg, "SET @x");
    CHECK(f.reach_in[static_cast<std::size_t>(dead)].empty());
    auto it = f.ud.find(UseSite{dead, "@x"});
    CHECK((it == f.ud.end() || it->second.empty()));
}

TEST_CASE("query assignment does not kill earlier definitions") {
    Program p = routine("DECLARE @x INT = 0; SET (@x) = (SELECT v FROM t WHERE k = 1); RETURN @x;");
    Cfg cfg = build_cfg(p);
    DataflowFacts f = analyze(cfg);
    CHECK(f.ud.at(UseSite{find_node(cfg, "RETURN"), "@x"}).size() == 2);
}

TEST_CASE("ud and du are inverse relations on every fixture") {
    for (const auto& e : std::filesystem::recursive_directory_iterator(testsupport::fixtures())) {
        if (e.path().extension() != ".csl") continue;
        CAPTURE(e.path().string());
        Program p = parse_source(testsupport::read_file(e.path()), ParseOptions{true});
        Cfg cfg = build_cfg(p);
        DataflowFacts f = analyze(cfg);
        for (const auto& [use, defs] : f.ud)
            for (int d : defs) {
                const auto& du = f.du[d];
                CHECK(std::find(du.begin(), du.end(), use) != du.end());
            }
        for (const auto& [d, uses] : f.du)
            for (const auto& u : uses) {
                const auto& ud = f.ud.at(u);
                CHECK(std::find(ud.begin(), ud.end(), d) != ud.end());
            }
    }
}

TEST_CASE("random graphs agree with path enumeration") {
    std::mt19937_64 rng(7);
    for (int i = 0; i < 300; ++i) {
        Cfg cfg = testsupport::random_cfg(rng);
        std::string msg = testsupport::check_against_oracle(cfg);
        CAPTURE(i);
        CHECK(msg.empty());
    }
}

TEST_CASE("synthetic entry definitions cover every reachable use") {
    std::mt19937_64 rng(11);
    for (int i = 0; i < 200; ++i) {
        Cfg cfg = testsupport::random_cfg(rng);
        DataflowFacts f = analyze(cfg);
        std::vector<bool> reachable(cfg.size(), false);
        std::vector<int> stack{cfg.entry};
        while (!stack.empty()) {
            int x = stack.back();
            stack.pop_back();
            if (reachable[static_cast<std::size_t>(x)]) continue;
            reachable[static_cast<std::size_t>(x)] = true;
            for (int s : cfg.succ[static_cast<std::size_t>(x)]) stack.push_back(s);
        }
        for (const auto& n : cfg.nodes) {
            if (!reachable[static_cast<std::size_t>(n.id)]) continue;
            for (const auto& u : n.uses) CHECK_FALSE(f.ud.at(UseSite{n.id, u}).empty());
        }
    }
}

TEST_CASE("facts serialize as a JSON object keyed by node") {
    Program p = routine("DECLARE @x INT = 1; RETURN @x;");
    Cfg cfg = build_cfg(p);
    std::string json = facts_to_json(cfg, analyze(cfg));
    CHECK(json.front() == '{');
    CHECK(json.find("\"0\"") != std::string::npos);
    CHECK(json.find("@x") != std::string::npos);
}
