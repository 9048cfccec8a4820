#include "longvid/report.hpp"

#include <chrono>
#include <sstream>

#include "longvid/common.hpp"

namespace longvid::report {

namespace {

bool is_volatile_key(const std::string& key) {
    const std::string tail = "_seconds";
    return key.size() >= tail.size() &&
           key.compare(key.size() - tail.size(), tail.size(), tail) == 0;
}

void validate_node(const nlohmann::json& doc, const nlohmann::json& schema,
                   const std::string& where, std::vector<std::string>& out) {
    if (schema.contains("type")) {
        const std::string& want = schema["type"].get_ref<const std::string&>();
        bool ok = (want == "object" && doc.is_object()) ||
                  (want == "array" && doc.is_array()) ||
                  (want == "string" && doc.is_string()) ||
                  (want == "boolean" && doc.is_boolean()) ||
                  (want == "number" && doc.is_number()) ||
                  (want == "integer" && doc.is_number_integer());
        if (!ok) {
            out.push_back(where + ": expected " + want + ", got " +
                          std::string(doc.type_name()));
            return;
        }
    }
    if (schema.contains("enum")) {
        bool hit = false;
        for (const auto& option : schema["enum"]) {
            if (doc == option) hit = true;
        }
        if (!hit) out.push_back(where + ": value not in enum");
    }
    if (schema.contains("required")) {
        for (const auto& key : schema["required"]) {
            const auto& name = key.get_ref<const std::string&>();
            if (!doc.contains(name)) out.push_back(where + ": missing required key " + name);
        }
    }
    if (schema.contains("properties") && doc.is_object()) {
        for (const auto& [key, sub] : schema["properties"].items()) {
            if (doc.contains(key)) validate_node(doc.at(key), sub, where + "." + key, out);
        }
    }
    if (schema.contains("items") && doc.is_array()) {
        const auto& sub = schema["items"];
        for (size_t i = 0; i < doc.size(); ++i) {
            validate_node(doc[i], sub, where + "[" + std::to_string(i) + "]", out);
        }
    }
}

}  // namespace

nlohmann::json strip_volatile(const nlohmann::json& doc) {
    if (doc.is_object()) {
        nlohmann::json out = nlohmann::json::object();
        for (const auto& [key, value] : doc.items()) {
            if (!is_volatile_key(key)) out[key] = strip_volatile(value);
        }
        return out;
    }
    if (doc.is_array()) {
        nlohmann::json out = nlohmann::json::array();
        for (const auto& value : doc) out.push_back(strip_volatile(value));
        return out;
    }
    return doc;
}

std::vector<std::string> validate_schema(const nlohmann::json& doc,
                                         const nlohmann::json& schema) {
    std::vector<std::string> out;
    validate_node(doc, schema, "$", out);
    return out;
}

nlohmann::json envelope(const nlohmann::json& config, uint64_t seed,
                        nlohmann::json payload) {
    double now = std::chrono::duration<double>(
                     std::chrono::system_clock::now().time_since_epoch())
                     .count();
    nlohmann::json doc = std::move(payload);
    doc["config"] = config;
    doc["seed"] = seed;
    doc["generated_at_seconds"] = now;
    return doc;
}

std::string render_csv(const std::vector<std::string>& header,
                       const std::vector<std::vector<std::string>>& rows) {
    std::ostringstream out;
    for (size_t i = 0; i < header.size(); ++i) {
        if (i > 0) out << ",";
        out << header[i];
    }
    out << "\n";
    for (const auto& row : rows) {
        if (row.size() != header.size()) {
            throw ConfigError("render_csv: row has " + std::to_string(row.size()) +
                              " cells, header has " + std::to_string(header.size()));
        }
        for (size_t i = 0; i < row.size(); ++i) {
            if (i > 0) out << ",";
            out << row[i];
        }
        out << "\n";
    }
    return out.str();
}

std::vector<std::string> validate_csv(const std::string& text,
                                      const nlohmann::json& schema) {
    std::vector<std::string> out;
    std::vector<std::string> want;
    for (const auto& c : schema.at("columns")) want.push_back(c.get<std::string>());

    std::istringstream in(text);
    std::string line;
    size_t line_no = 0;
    size_t arity = want.size();
    while (std::getline(in, line)) {
        ++line_no;
        std::vector<std::string> cells;
        size_t start = 0;
        while (true) {
            size_t comma = line.find(',', start);
            cells.push_back(line.substr(start, comma - start));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        if (line_no == 1) {
            if (cells != want) out.push_back("line 1: header does not match schema columns");
            continue;
        }
        if (cells.size() != arity) {
            out.push_back("line " + std::to_string(line_no) + ": expected " +
                          std::to_string(arity) + " cells, got " +
                          std::to_string(cells.size()));
        }
    }
    if (line_no == 0) out.push_back("empty document");
    return out;
}

std::string render_gnuplot(const std::string& comment,
                           const std::vector<std::pair<double, double>>& points) {
    std::ostringstream out;
    out << "# " << comment << "\n";
    out.precision(12);
    for (const auto& [x, y] : points) out << x << " " << y << "\n";
    return out.str();
}

}  // namespace longvid::report
