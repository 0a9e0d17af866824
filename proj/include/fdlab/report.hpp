#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "fdlab/digest.hpp"
#include "fdlab/error.hpp"
#include "fdlab/io.hpp"
#include "fdlab/stats.hpp"
#include "fdlab/sweep.hpp"

namespace fdlab {

inline constexpr std::string_view kToolVersion = "fdlab 0.1.0";

/// Identity block written into every output file.
struct Stamp {
  std::string tool_version{kToolVersion};
  std::string config_digest;
  std::string checkpoint_digest;  // empty when no model was involved
  std::uint64_t seed = 42;
};

inline Stamp make_stamp(const Json& effective_config, std::string checkpoint_digest, std::uint64_t seed) {
  return Stamp{std::string(kToolVersion), digest_text(effective_config.dump()), std::move(checkpoint_digest), seed};
}

inline Json to_json(const Stamp& s) {
  return {{"tool_version", s.tool_version},
          {"config_digest", s.config_digest},
          {"checkpoint_digest", s.checkpoint_digest},
          {"seed", s.seed}};
}

inline Stamp stamp_from_json(const Json& j) {
  return Stamp{j.at("tool_version").get<std::string>(), j.at("config_digest").get<std::string>(),
               j.at("checkpoint_digest").get<std::string>(), j.at("seed").get<std::uint64_t>()};
}

inline std::string stamp_line(const Stamp& s) {
  return s.tool_version + " config=" + s.config_digest + " checkpoint=" + (s.checkpoint_digest.empty() ? "none" : s.checkpoint_digest) +
         " seed=" + std::to_string(s.seed);
}

/// Fixed-notation number text, so emitted files never depend on locale or stream state.
inline std::string fixed(double x, int digits = 6) {
  if (!std::isfinite(x)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, x);
  return buf;
}

// ---------------------------------------------------------------------------
// Sweep reports
// ---------------------------------------------------------------------------

inline Json to_json(const GridPoint& p, double level = 0.95) {
  Json j{{"label", p.label},     {"x", p.x},     {"params", p.params},         {"goal", to_string(p.goal)},
         {"correct", p.correct}, {"bug", p.bug}, {"incoherent", p.incoherent}, {"trials", p.trials},
         {"successes", p.successes()}};
  if (p.trials) {
    const BinomialSummary s = p.summary(level);
    j["rate"] = s.estimate;
    j["ci"] = {{"level", level}, {"lower", s.lower}, {"upper", s.upper}};
  }
  return j;
}

inline Outcome parse_outcome(std::string_view s) {
  for (Outcome o : {Outcome::correct, Outcome::bug, Outcome::incoherent})
    if (to_string(o) == s) return o;
  fail(ErrorKind::config, "unknown outcome '" + std::string(s) + "'");
}

inline GridPoint grid_point_from_json(const Json& j) {
  GridPoint p;
  p.label = j.at("label").get<std::string>();
  p.x = j.at("x").get<double>();
  p.params = j.at("params");
  p.goal = parse_outcome(j.at("goal").get<std::string>());
  p.correct = j.at("correct").get<std::size_t>();
  p.bug = j.at("bug").get<std::size_t>();
  p.incoherent = j.at("incoherent").get<std::size_t>();
  p.trials = j.at("trials").get<std::size_t>();
  require(p.correct + p.bug + p.incoherent == p.trials, ErrorKind::corrupt,
          "grid point '" + p.label + "': outcome counts do not sum to trials");
  return p;
}

inline Json to_json(const SweepReport& r, const Stamp& stamp, const Json& config = nullptr) {
  Json points = Json::array(), subsets = Json::array();
  for (const auto& p : r.points) points.push_back(to_json(p));
  for (const auto& s : r.subsets)
    subsets.push_back({{"k", s.k}, {"heads", s.heads}, {"successes", s.successes}, {"trials", s.trials}});
  Json j{{"kind", "sweep"},   {"protocol", r.protocol}, {"stamp", to_json(stamp)}, {"subject", r.subject},
         {"spec", r.spec},    {"metadata", r.metadata}, {"points", points}};
  if (!config.is_null()) j["config"] = config;
  if (!r.subsets.empty()) j["subsets"] = subsets;
  if (r.wall_clock_s) j["wall_clock_s"] = *r.wall_clock_s;
  return j;
}

inline SweepReport sweep_report_from_json(const Json& j) {
  try {
    require(j.at("kind") == "sweep", ErrorKind::config, "not a sweep report");
    SweepReport r;
    r.protocol = j.at("protocol").get<std::string>();
    r.subject = j.at("subject").get<std::string>();
    r.spec = j.at("spec");
    r.metadata = j.at("metadata");
    for (const auto& p : j.at("points")) r.points.push_back(grid_point_from_json(p));
    if (j.contains("subsets"))
      for (const auto& s : j.at("subsets"))
        r.subsets.push_back({s.at("k").get<std::size_t>(), s.at("heads").get<std::vector<std::size_t>>(),
                             s.at("successes").get<std::size_t>(), s.at("trials").get<std::size_t>()});
    if (j.contains("wall_clock_s")) r.wall_clock_s = j.at("wall_clock_s").get<double>();
    return r;
  } catch (const Json::exception& e) {
    fail(ErrorKind::config, std::string("sweep report: ") + e.what());
  }
}

inline std::string dump_json(const Json& j) { return j.dump(2) + "\n"; }

/// One header comment with the stamp, one column header, then one row per grid point.
inline std::string sweep_csv(const SweepReport& r, const Stamp& stamp) {
  std::string out = "# " + stamp_line(stamp) + " protocol=" + r.protocol + "\n";
  out += "label,x,goal,trials,correct,bug,incoherent,rate,ci_lower,ci_upper\n";
  for (const auto& p : r.points) {
    out += p.label + "," + fixed(p.x) + "," + std::string(to_string(p.goal)) + "," + std::to_string(p.trials) + "," +
           std::to_string(p.correct) + "," + std::to_string(p.bug) + "," + std::to_string(p.incoherent);
    if (p.trials) {
      const auto s = p.summary();
      out += "," + fixed(s.estimate) + "," + fixed(s.lower) + "," + fixed(s.upper) + "\n";
    } else {
      out += ",,,\n";
    }
  }
  return out;
}

/// Success rate against x as a step curve: the path holds the rate of each point until the next x.
inline std::string step_svg(const SweepReport& r, const Stamp& stamp, std::string_view x_label) {
  require(!r.points.empty(), ErrorKind::config, "cannot plot an empty sweep");
  std::vector<const GridPoint*> pts;
  for (const auto& p : r.points) pts.push_back(&p);
  std::stable_sort(pts.begin(), pts.end(), [](const GridPoint* a, const GridPoint* b) { return a->x < b->x; });
  const double x0 = pts.front()->x, x1 = pts.back()->x;
  const double W = 480, H = 320, L = 60, R = 20, T = 30, B = 50;
  auto sx = [&](double x) { return x1 > x0 ? L + (x - x0) / (x1 - x0) * (W - L - R) : L + (W - L - R) / 2; };
  auto sy = [&](double y) { return T + (1.0 - y) * (H - T - B); };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fixed(W, 0) << "\" height=\"" << fixed(H, 0)
      << "\" viewBox=\"0 0 " << fixed(W, 0) << " " << fixed(H, 0) << "\">\n";
  svg << "<!-- " << stamp_line(stamp) << " protocol=" << r.protocol << " -->\n";
  const StepDetection step = detect_step(r);
  svg << "<desc>success rate by " << x_label << "; step at "
      << (step.location ? fixed(*step.location, 3) : std::string("none")) << "</desc>\n";
  svg << "<rect x=\"0\" y=\"0\" width=\"" << fixed(W, 0) << "\" height=\"" << fixed(H, 0) << "\" fill=\"white\"/>\n";
  svg << "<line x1=\"" << fixed(L, 1) << "\" y1=\"" << fixed(sy(0), 1) << "\" x2=\"" << fixed(W - R, 1) << "\" y2=\""
      << fixed(sy(0), 1) << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << fixed(L, 1) << "\" y1=\"" << fixed(sy(0), 1) << "\" x2=\"" << fixed(L, 1) << "\" y2=\""
      << fixed(sy(1), 1) << "\" stroke=\"black\"/>\n";
  for (double y : {0.0, 0.5, 1.0})
    svg << "<text x=\"" << fixed(L - 8, 1) << "\" y=\"" << fixed(sy(y) + 4, 1)
        << "\" font-size=\"11\" text-anchor=\"end\">" << fixed(y, 1) << "</text>\n";
  for (const GridPoint* p : pts)
    svg << "<text x=\"" << fixed(sx(p->x), 1) << "\" y=\"" << fixed(H - B + 16, 1)
        << "\" font-size=\"10\" text-anchor=\"middle\">" << fixed(p->x, 2) << "</text>\n";
  svg << "<text x=\"" << fixed((L + W - R) / 2, 1) << "\" y=\"" << fixed(H - 10, 1)
      << "\" font-size=\"12\" text-anchor=\"middle\">" << x_label << "</text>\n";

  svg << "<path class=\"step\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" d=\"M " << fixed(sx(pts[0]->x), 2)
      << " " << fixed(sy(pts[0]->rate()), 2);
  for (std::size_t i = 1; i < pts.size(); ++i) {
    svg << " H " << fixed(sx(pts[i]->x), 2);
    if (pts[i]->rate() != pts[i - 1]->rate()) svg << " V " << fixed(sy(pts[i]->rate()), 2);
  }
  svg << "\"/>\n";
  for (const GridPoint* p : pts)
    svg << "<circle cx=\"" << fixed(sx(p->x), 2) << "\" cy=\"" << fixed(sy(p->rate()), 2)
        << "\" r=\"3\" fill=\"#1f77b4\"/>\n";
  svg << "</svg>\n";
  return svg.str();
}

struct EmitFormats {
  bool json = true;
  bool csv = true;
  bool svg = false;
};

/// Writes `<stem>.json`, `<stem>.csv` and optionally `<stem>.svg`; returns the paths written.
inline std::vector<std::filesystem::path> emit_report(const SweepReport& r, const Stamp& stamp,
                                                      const std::filesystem::path& stem, EmitFormats formats = {},
                                                      std::string_view x_label = "x", const Json& config = nullptr) {
  std::vector<std::filesystem::path> out;
  auto with_ext = [&](const char* ext) {
    std::filesystem::path p = stem;
    p += ext;
    return p;
  };
  if (formats.json) {
    out.push_back(with_ext(".json"));
    write_file(out.back(), dump_json(to_json(r, stamp, config)));
  }
  if (formats.csv) {
    out.push_back(with_ext(".csv"));
    write_file(out.back(), sweep_csv(r, stamp));
  }
  if (formats.svg) {
    out.push_back(with_ext(".svg"));
    write_file(out.back(), step_svg(r, stamp, x_label));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Free-form documents and tables
// ---------------------------------------------------------------------------

/// A JSON document `{kind, stamp, config, ...body}`.
inline Json stamped_document(std::string_view kind, const Stamp& stamp, const Json& config, const Json& body) {
  Json j = body.is_object() ? body : Json{{"body", body}};
  j["kind"] = kind;
  j["stamp"] = to_json(stamp);
  j["config"] = config;
  return j;
}

inline std::string csv_table(const Stamp& stamp, std::string_view what, const std::vector<std::string>& header,
                             const std::vector<std::vector<std::string>>& rows) {
  std::string out = "# " + stamp_line(stamp) + " table=" + std::string(what) + "\n";
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) out += (i ? "," : "") + cells[i];
    out += "\n";
  };
  line(header);
  for (const auto& r : rows) {
    require(r.size() == header.size(), ErrorKind::shape, "CSV row width differs from the header");
    line(r);
  }
  return out;
}

}  // namespace fdlab
