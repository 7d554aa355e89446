#pragma once

#include <chrono>
#include <exception>
#include <string>
#include <vector>

namespace rtfusion::verify {

struct CheckOutcome {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct SuiteReport {
  std::string name;
  std::vector<CheckOutcome> checks;
  double seconds = 0.0;

  bool passed() const {
    if (checks.empty()) return false;
    for (const auto& c : checks) {
      if (!c.passed) return false;
    }
    return true;
  }
  std::size_t failures() const {
    std::size_t n = 0;
    for (const auto& c : checks) n += c.passed ? 0 : 1;
    return n;
  }
  void add(std::string check, bool ok, std::string detail = {}) {
    checks.push_back({std::move(check), ok, std::move(detail)});
  }
};

/// Times body(report). An escaping exception is recorded as a failed check.
template <typename Body>
SuiteReport run_suite(const std::string& name, Body&& body) {
  SuiteReport report;
  report.name = name;
  const auto start = std::chrono::steady_clock::now();
  try {
    body(report);
  } catch (const std::exception& e) {
    report.add("uncaught exception", false, e.what());
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace rtfusion::verify
