#pragma once

#include <istream>
#include <string>
#include <vector>

#include "common.hpp"

// RFC 4180 style CSV: fields are emitted quoted, parsing accepts quoted and
// bare fields, embedded quotes doubled, CRLF or LF row endings.

namespace duap {

inline std::string csv_quote(const std::string& field) {
    std::string out = "\"";
    for (char c : field) {
        if (c == '"') out += "\"\"";
        else out += c;
    }
    out += '"';
    return out;
}

inline std::vector<std::vector<std::string>> csv_parse(std::istream& in) {
    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> row;
    std::string field;
    bool in_quotes = false;
    bool field_started = false;
    int c;
    auto end_field = [&]() {
        row.push_back(field);
        field.clear();
        field_started = false;
    };
    auto end_row = [&]() {
        end_field();
        rows.push_back(row);
        row.clear();
    };
    while ((c = in.get()) != EOF) {
        char ch = static_cast<char>(c);
        if (in_quotes) {
            if (ch == '"') {
                if (in.peek() == '"') {
                    field += '"';
                    in.get();
                } else {
                    in_quotes = false;
                }
            } else {
                field += ch;
            }
        } else if (ch == '"' && !field_started) {
            in_quotes = true;
            field_started = true;
        } else if (ch == ',') {
            end_field();
        } else if (ch == '\n') {
            end_row();
        } else if (ch == '\r') {
            // swallowed; the following \n (if any) ends the row
        } else {
            field += ch;
            field_started = true;
        }
    }
    if (in_quotes) throw Error(ErrorCode::Format, "unterminated quoted CSV field");
    if (field_started || !field.empty() || !row.empty()) end_row();
    return rows;
}

}  // namespace duap
