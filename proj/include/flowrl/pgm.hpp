#pragma once

// Binary PGM (P5, maxval 255) reading and writing, plus the JSON sidecar that
// accompanies extracted patches.

#include <cctype>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flowrl/error.hpp"
#include "flowrl/vision_geometry.hpp"

namespace flowrl::vision {

namespace detail {

// Next whitespace-delimited header token, skipping '#' comments.
inline std::string pgm_token(std::istream& in) {
  std::string tok;
  int c = in.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
    } else if (std::isspace(c)) {
      if (!tok.empty()) break;
    } else {
      tok.push_back(static_cast<char>(c));
    }
    c = in.get();
  }
  if (tok.empty()) throw FormatError("pgm: truncated header");
  return tok;
}

inline std::size_t pgm_number(std::istream& in, const char* what) {
  const std::string tok = pgm_token(in);
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(tok, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != tok.size()) throw FormatError(std::string("pgm: bad ") + what + " '" + tok + "'");
  return static_cast<std::size_t>(v);
}

}  // namespace detail

inline IntensityGrid read_pgm(std::istream& in) {
  if (detail::pgm_token(in) != "P5") throw FormatError("pgm: only binary P5 images are supported");
  const std::size_t w = detail::pgm_number(in, "width");
  const std::size_t h = detail::pgm_number(in, "height");
  const std::size_t maxval = detail::pgm_number(in, "maxval");
  if (maxval != 255) throw FormatError("pgm: maxval must be 255");
  if (w == 0 || h == 0) throw FormatError("pgm: empty image");
  // pgm_token consumed exactly one whitespace byte after maxval.
  std::vector<std::uint8_t> px(w * h);
  in.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size()));
  if (in.gcount() != static_cast<std::streamsize>(px.size())) throw FormatError("pgm: truncated pixel data");
  return IntensityGrid(w, h, std::move(px));
}

inline IntensityGrid read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("pgm: cannot open " + path.string());
  return read_pgm(in);
}

inline void write_pgm(std::ostream& out, const IntensityGrid& g) {
  out << "P5\n" << g.width() << ' ' << g.height() << "\n255\n";
  const auto px = g.pixels();
  out.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
}

inline void write_pgm(const std::filesystem::path& path, const IntensityGrid& g) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("pgm: cannot write " + path.string());
  write_pgm(out, g);
}

struct PatchMetadata {
  double angle_deg = 0.0;
  double h = 0.0;
  double radius = 0.0;
  double mean_intensity = 0.0;
  std::size_t width = 0;
  std::size_t height = 0;
};

inline nlohmann::json to_json(const PatchMetadata& m) {
  return {{"angle", m.angle_deg}, {"h", m.h},         {"radius", m.radius},
          {"mean_intensity", m.mean_intensity}, {"width", m.width}, {"height", m.height}};
}

inline PatchMetadata patch_metadata_from_json(const nlohmann::json& j) {
  try {
    PatchMetadata m;
    m.angle_deg = j.at("angle").get<double>();
    m.h = j.at("h").get<double>();
    m.radius = j.at("radius").get<double>();
    m.mean_intensity = j.value("mean_intensity", 0.0);
    m.width = j.value("width", std::size_t{0});
    m.height = j.value("height", std::size_t{0});
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("patch metadata: ") + e.what());
  }
}

}  // namespace flowrl::vision
