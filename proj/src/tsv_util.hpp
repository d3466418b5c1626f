#pragma once

// small shared helpers for the tab-separated persistence formats

#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "jpu/errors.hpp"
#include "jpu/model.hpp"

namespace jpu::tsv {

inline std::string seq_str(const lm::TokenSeq& s) {
    if (s.empty()) return "-";
    std::string out;
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ' ';
        out += std::to_string(s[i]);
    }
    return out;
}

inline lm::TokenSeq parse_seq(const std::string& s) {
    if (s == "-") return {};
    lm::TokenSeq out;
    std::istringstream is(s);
    long v;
    while (is >> v) out.push_back(lm::Token(v));
    if (!is.eof()) throw InputError("malformed token sequence '" + s + "'");
    return out;
}

inline std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> out;
    size_t start = 0;
    while (true) {
        size_t p = line.find('\t', start);
        if (p == std::string::npos) {
            out.push_back(line.substr(start));
            break;
        }
        out.push_back(line.substr(start, p - start));
        start = p + 1;
    }
    return out;
}

// round-trip exact for finite doubles
inline std::string fmt_g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline double parse_double(const std::string& s) {
    size_t used = 0;
    double v = std::stod(s, &used);
    if (used != s.size()) throw InputError("malformed number '" + s + "'");
    return v;
}

// "key=value" header field access
inline std::string header_field(const std::string& fld, const char* key) {
    std::string pre = std::string(key) + "=";
    if (fld.rfind(pre, 0) != 0) throw InputError("expected header field " + pre + "..., got " + fld);
    return fld.substr(pre.size());
}

} // namespace jpu::tsv
