#include "sfpn/cost_model.hpp"

#include <fstream>
#include <map>
#include <stdexcept>

namespace sfpn {

const LayerFiring* FiringReport::layer(const std::string& name) const {
  for (const auto& l : layers) {
    if (l.name == name) return &l;
  }
  return nullptr;
}

FiringReport record_firing(const ActivityRecord& record, int time_steps) {
  if (time_steps < 1) throw std::invalid_argument("record_firing: time_steps must be >= 1");
  FiringReport r;
  r.time_steps = time_steps;

  std::map<std::string, std::size_t> seen;
  std::vector<int> counts;
  for (const auto& s : record.spiking) {
    auto [it, fresh] = seen.emplace(s.name, r.layers.size());
    if (fresh) {
      r.layers.push_back({s.name, std::vector<double>(s.rate_per_step.size(), 0.0), 0.0, s.neurons});
      counts.push_back(0);
    }
    auto& l = r.layers[it->second];
    for (std::size_t t = 0; t < s.rate_per_step.size() && t < l.rate_per_step.size(); ++t) {
      l.rate_per_step[t] += s.rate_per_step[t];
    }
    ++counts[it->second];
  }
  double weighted = 0.0, total = 0.0;
  for (std::size_t i = 0; i < r.layers.size(); ++i) {
    auto& l = r.layers[i];
    double sum = 0.0;
    for (double& v : l.rate_per_step) sum += v /= counts[i];
    l.rate = l.rate_per_step.empty() ? 0.0 : sum / l.rate_per_step.size();
    weighted += l.rate * l.neurons;
    total += l.neurons;
  }
  r.mean_rate = total > 0.0 ? weighted / total : 0.0;

  seen.clear();
  counts.clear();
  for (const auto& c : record.convs) {
    auto [it, fresh] = seen.emplace(c.name, r.convs.size());
    if (fresh) {
      r.convs.push_back({c.name, 0.0, c.dense_ops, 0.0, 0.0, c.real_valued});
      counts.push_back(0);
    }
    double s = 0.0;
    for (double v : c.input_activity) s += v;
    if (!c.input_activity.empty()) s /= c.input_activity.size();
    r.convs[it->second].s += s;
    ++counts[it->second];
  }
  for (std::size_t i = 0; i < r.convs.size(); ++i) {
    auto& c = r.convs[i];
    c.s /= counts[i];
    if (c.mac) {
      c.ops = static_cast<double>(c.A);
      c.energy_pj = c.ops * kMacEnergyPj;
      r.head_macs += c.ops;
    } else {
      c.ops = c.s * time_steps * static_cast<double>(c.A);
      c.energy_pj = c.ops * kAddEnergyPj;
      r.total_adds += c.ops;
    }
  }
  return r;
}

std::vector<std::pair<std::string, std::uint64_t>> dense_additions(const SpikeFpn& net) {
  std::vector<std::pair<std::string, std::uint64_t>> out;
  for (const auto& l : net.conv_layers()) out.emplace_back(l.name, l.dense_ops());
  return out;
}

EnergyEstimate energy_estimate(double additions, double macs) {
  return {additions * kAddEnergyPj * 1e-12, macs * kMacEnergyPj * 1e-12};
}

EnergyEstimate energy_estimate(const FiringReport& report) {
  return energy_estimate(report.total_adds, report.head_macs);
}

nlohmann::json report_to_json(const FiringReport& report) {
  nlohmann::json j;
  j["time_steps"] = report.time_steps;
  j["per_layer"] = nlohmann::json::array();
  for (const auto& c : report.convs) {
    j["per_layer"].push_back({{"name", c.name},
                              {"s", c.s},
                              {"A", c.A},
                              {"ops", c.ops},
                              {"energy_pj", c.energy_pj},
                              {"kind", c.mac ? "mac" : "add"}});
  }
  j["firing"] = nlohmann::json::array();
  for (const auto& l : report.layers) {
    j["firing"].push_back({{"name", l.name}, {"rate", l.rate}, {"rate_per_step", l.rate_per_step}, {"neurons", l.neurons}});
  }
  const auto e = energy_estimate(report);
  j["totals"] = {{"additions", report.total_adds},
                 {"head_macs", report.head_macs},
                 {"energy_additions_j", e.add_joules},
                 {"energy_head_macs_j", e.mac_joules},
                 {"energy_total_j", e.total_joules()},
                 {"mean_firing_rate", report.mean_rate}};
  return j;
}

void write_report_csv(const std::filesystem::path& path, const FiringReport& report) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(10);
  out << "name,kind,s,A,ops,energy_pj\n";
  for (const auto& c : report.convs) {
    out << c.name << ',' << (c.mac ? "mac" : "add") << ',' << c.s << ',' << c.A << ',' << c.ops << ',' << c.energy_pj
        << '\n';
  }
  for (const auto& l : report.layers) out << l.name << ",rate," << l.rate << ",,,\n";
}

}  // namespace sfpn
