#include "deepmts/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include "json.hpp"
#include <numeric>
#include <sstream>

#include "deepmts/error.hpp"

namespace deepmts {

namespace {

// Fenwick tree over risk ranks.
class RankCounter {
 public:
  explicit RankCounter(std::size_t n) : tree_(n + 1, 0) {}
  void add(std::size_t rank) {
    for (std::size_t i = rank + 1; i < tree_.size(); i += i & (~i + 1)) ++tree_[i];
  }
  // Number of inserted ranks < rank.
  std::uint64_t below(std::size_t rank) const {
    std::uint64_t s = 0;
    for (std::size_t i = rank; i > 0; i -= i & (~i + 1)) s += tree_[i];
    return s;
  }

 private:
  std::vector<std::uint64_t> tree_;
};

}  // namespace

double c_index(std::span<const double> risk, std::span<const SurvivalLabel> labels) {
  if (risk.size() != labels.size()) throw ValidationError("c_index: risk and label counts differ");
  validate_labels(labels);
  for (double h : risk) {
    if (!std::isfinite(h)) throw ValidationError("c_index: non-finite risk score");
  }
  const std::size_t n = risk.size();
  // Dense ranks of risk values; equal risks share a rank.
  std::vector<double> sorted(risk.begin(), risk.end());
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  std::vector<std::size_t> rank(n);
  for (std::size_t i = 0; i < n; ++i) rank[i] = static_cast<std::size_t>(std::lower_bound(sorted.begin(), sorted.end(), risk[i]) - sorted.begin());

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return labels[a].time > labels[b].time; });

  RankCounter later(sorted.size());
  std::uint64_t inserted = 0, comparable = 0, concordant = 0, tied = 0;
  for (std::size_t k = 0; k < n;) {
    std::size_t end = k;
    while (end < n && labels[order[end]].time == labels[order[k]].time) ++end;
    // Everything inserted so far has a strictly later time.
    for (std::size_t m = k; m < end; ++m) {
      const std::size_t i = order[m];
      if (!labels[i].event) continue;
      const std::uint64_t lower = later.below(rank[i]);
      const std::uint64_t lower_or_equal = later.below(rank[i] + 1);
      comparable += inserted;
      concordant += lower;
      tied += lower_or_equal - lower;
    }
    for (std::size_t m = k; m < end; ++m) {
      later.add(rank[order[m]]);
      ++inserted;
    }
    k = end;
  }
  if (comparable == 0) throw NoComparablePairsError();
  return (static_cast<double>(concordant) + 0.5 * static_cast<double>(tied)) / static_cast<double>(comparable);
}

double dsc(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth) {
  if (pred.size() != truth.size()) throw ValidationError("dsc: grid mismatch");
  std::size_t a = 0, b = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, t = truth[i] != 0;
    a += p;
    b += t;
    both += p && t;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

template <class T>
std::vector<std::uint8_t> threshold_mask(std::span<const T> prob, double threshold) {
  std::vector<std::uint8_t> out(prob.size());
  for (std::size_t i = 0; i < prob.size(); ++i) out[i] = static_cast<double>(prob[i]) > threshold ? 1 : 0;
  return out;
}

template std::vector<std::uint8_t> threshold_mask(std::span<const float>, double);
template std::vector<std::uint8_t> threshold_mask(std::span<const double>, double);

std::string format_number(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

void MetricsReport::set(const std::string& key, double value) { set(key, format_number(value)); }

void MetricsReport::set(const std::string& key, const std::string& value) {
  if (key.empty() || key.find_first_of("=\n") != std::string::npos) throw ValidationError("metrics: bad key '" + key + "'");
  for (auto& [k, v] : entries_) {
    if (k == key) {
      v = value;
      return;
    }
  }
  entries_.emplace_back(key, value);
}

bool MetricsReport::contains(const std::string& key) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const auto& e) { return e.first == key; });
}

std::string MetricsReport::get(const std::string& key) const {
  for (const auto& [k, v] : entries_) {
    if (k == key) return v;
  }
  throw ValidationError("metrics: missing key '" + key + "'");
}

double MetricsReport::number(const std::string& key) const {
  const std::string s = get(key);
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw ValidationError("metrics: '" + key + "' is not numeric");
  return v;
}

std::string MetricsReport::to_kv() const {
  std::ostringstream os;
  for (const auto& [k, v] : entries_) os << k << '=' << v << '\n';
  return os.str();
}

std::string MetricsReport::to_json() const {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& [k, v] : entries_) {
    double num = 0.0;
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), num);
    if (ec == std::errc() && ptr == v.data() + v.size()) {
      j[k] = num;
    } else {
      j[k] = v;
    }
  }
  return j.dump(2) + "\n";
}

void MetricsReport::write_kv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot write " + path.string());
  out << to_kv();
}

void MetricsReport::write_json(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot write " + path.string());
  out << to_json();
}

MetricsReport MetricsReport::read_kv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw RuntimeFailure("cannot read " + path.string());
  MetricsReport r;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": expected key=value");
    r.set(line.substr(0, eq), line.substr(eq + 1));
  }
  return r;
}

}  // namespace deepmts
