#include <algorithm>
#include <cctype>
#include <fstream>
#include <random>
#include <sstream>

#include <json.hpp>

#include "aggify/engine.hpp"

namespace aggify {

namespace {

std::string lower(std::string s) {
    for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

std::string trim(std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

struct Field {
    std::string text;
    bool quoted = false;
};

std::vector<Field> split_csv_line(const std::string& line, const std::string& file, int lineno) {
    std::vector<Field> out;
    std::size_t i = 0;
    for (;;) {
        Field f;
        while (i < line.size() && line[i] == ' ') ++i;
        if (i < line.size() && line[i] == '"') {
            f.quoted = true;
            ++i;
            for (;;) {
                if (i >= line.size())
                    throw Error(ErrorKind::Schema, file + ":" + std::to_string(lineno) + ": unterminated quote");
                if (line[i] == '"') {
                    if (i + 1 < line.size() && line[i + 1] == '"') {
                        f.text += '"';
                        i += 2;
                        continue;
                    }
                    ++i;
                    break;
                }
                f.text += line[i++];
            }
            while (i < line.size() && line[i] == ' ') ++i;
        } else {
            std::size_t start = i;
            while (i < line.size() && line[i] != ',') ++i;
            f.text = trim(std::string_view(line).substr(start, i - start));
        }
        out.push_back(std::move(f));
        if (i >= line.size()) break;
        if (line[i] != ',') throw Error(ErrorKind::Schema, file + ":" + std::to_string(lineno) + ": expected ','");
        ++i;
    }
    return out;
}

Value parse_field(const Field& f, ScalarType type, const std::string& where) {
    if (!f.quoted && (f.text.empty() || f.text == "NULL")) return Value::null();
    auto bad = [&]() -> Error {
        return Error(ErrorKind::Schema, where + ": '" + f.text + "' is not a valid " + std::string(to_string(type)));
    };
    switch (type) {
    case ScalarType::Int: {
        try {
            std::size_t used = 0;
            long long v = std::stoll(f.text, &used);
            if (used != f.text.size()) throw bad();
            return Value::integer(v);
        } catch (const Error&) {
            throw;
        } catch (...) {
            throw bad();
        }
    }
    case ScalarType::Decimal: {
        auto d = Decimal::parse(f.text);
        if (!d) throw bad();
        return Value::decimal(*d);
    }
    case ScalarType::Varchar: return Value::varchar(f.text);
    case ScalarType::Bool: {
        std::string t = lower(f.text);
        if (t == "true" || t == "1") return Value::boolean(true);
        if (t == "false" || t == "0") return Value::boolean(false);
        throw bad();
    }
    default: throw bad();
    }
}

std::string csv_field(const Value& v) {
    if (v.is_null()) return "";
    if (v.is_varchar()) {
        std::string out = "\"";
        for (char c : v.as_varchar()) {
            if (c == '"') out += '"';
            out += c;
        }
        return out + "\"";
    }
    return v.to_display();
}

} // namespace

const Relation* Catalog::find(std::string_view name) const {
    auto it = tables.find(lower(std::string(name)));
    return it == tables.end() ? nullptr : it->second.get();
}

void Catalog::add(std::string name, Relation rel) {
    name = lower(std::move(name));
    if (tables.count(name)) throw Error(ErrorKind::DuplicateTable, "duplicate table " + name);
    tables.emplace(std::move(name), std::make_shared<const Relation>(std::move(rel)));
}

Relation load_csv(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw Error(ErrorKind::Io, "cannot open " + file.string());
    const std::string fname = file.filename().string();
    std::string line;
    int lineno = 0;
    Relation rel;
    bool header = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!header) {
            if (trim(line).empty()) continue;
            for (const auto& f : split_csv_line(line, fname, lineno)) {
                auto colon = f.text.find(':');
                if (colon == std::string::npos)
                    throw Error(ErrorKind::Schema, fname + ":" + std::to_string(lineno) + ": header field '" + f.text +
                                                       "' lacks ':TYPE'");
                auto type = parse_scalar_type(trim(f.text.substr(colon + 1)));
                if (!type || *type == ScalarType::Null || *type == ScalarType::Record || *type == ScalarType::Table)
                    throw Error(ErrorKind::Schema, fname + ":" + std::to_string(lineno) + ": unknown type in '" +
                                                       f.text + "'");
                rel.columns.push_back(Column{trim(f.text.substr(0, colon)), *type});
            }
            header = true;
            continue;
        }
        if (line.empty()) continue;
        auto fields = split_csv_line(line, fname, lineno);
        if (fields.size() != rel.columns.size())
            throw Error(ErrorKind::Schema, fname + ":" + std::to_string(lineno) + ": expected " +
                                               std::to_string(rel.columns.size()) + " fields, got " +
                                               std::to_string(fields.size()));
        Row row;
        for (std::size_t i = 0; i < fields.size(); ++i)
            row.push_back(parse_field(fields[i], rel.columns[i].type, fname + ":" + std::to_string(lineno)));
        rel.rows.push_back(std::move(row));
    }
    if (!header) throw Error(ErrorKind::Schema, fname + ": missing header line");
    return rel;
}

Catalog load_catalog(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw Error(ErrorKind::Io, "not a directory: " + dir.string());
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".csv") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    Catalog c;
    for (const auto& f : files) c.add(f.stem().string(), load_csv(f));
    return c;
}

void save_csv(const Relation& rel, const std::filesystem::path& file) {
    std::ofstream out(file);
    if (!out) throw Error(ErrorKind::Io, "cannot write " + file.string());
    for (std::size_t i = 0; i < rel.columns.size(); ++i)
        out << (i ? "," : "") << rel.columns[i].name << ":" << to_string(rel.columns[i].type);
    out << "\n";
    for (const auto& row : rel.rows) {
        for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << csv_field(row[i]);
        out << "\n";
    }
}

void save_catalog(const Catalog& catalog, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    for (const auto& [name, rel] : catalog.tables) save_csv(*rel, dir / (name + ".csv"));
}

Catalog shuffle_catalog(const Catalog& catalog, std::uint64_t seed) {
    Catalog out;
    std::mt19937_64 rng(seed);
    for (const auto& [name, rel] : catalog.tables) {
        Relation copy = *rel;
        std::shuffle(copy.rows.begin(), copy.rows.end(), rng);
        out.tables.emplace(name, std::make_shared<const Relation>(std::move(copy)));
    }
    return out;
}

ExecStats& ExecStats::operator+=(const ExecStats& o) {
    cursor_materializations += o.cursor_materializations;
    materialized_rows += o.materialized_rows;
    rows_moved_to_client += o.rows_moved_to_client;
    bytes_moved_to_client += o.bytes_moved_to_client;
    accumulate_calls += o.accumulate_calls;
    return *this;
}

std::string ExecStats::to_json() const {
    nlohmann::ordered_json j;
    j["cursor_materializations"] = cursor_materializations;
    j["materialized_rows"] = materialized_rows;
    j["rows_moved_to_client"] = rows_moved_to_client;
    j["bytes_moved_to_client"] = bytes_moved_to_client;
    j["accumulate_calls"] = accumulate_calls;
    return j.dump();
}

std::string relation_to_text(const Relation& rel) {
    std::ostringstream out;
    for (std::size_t i = 0; i < rel.columns.size(); ++i) out << (i ? " | " : "") << rel.columns[i].name;
    out << "\n";
    for (const auto& row : rel.rows) {
        for (std::size_t i = 0; i < row.size(); ++i) out << (i ? " | " : "") << row[i].to_display();
        out << "\n";
    }
    return out.str();
}

} // namespace aggify
