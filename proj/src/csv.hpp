#pragma once

#include <sstream>
#include <string>
#include <vector>

#include "ocumorph/common.hpp"

// Minimal CSV helpers shared by the score readers (no quoting).
namespace ocumorph::csv {

inline std::vector<std::string> split(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream s(line);
    while (std::getline(s, cell, ',')) {
        while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
        while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
        out.push_back(cell);
    }
    return out;
}

inline double to_double(const std::string& s, const std::string& where) {
    std::size_t used = 0;
    double v = 0;
    try {
        v = std::stod(s, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used == 0 || used != s.size()) throw FormatError(where + ": not a number '" + s + "'");
    return v;
}

}  // namespace ocumorph::csv
