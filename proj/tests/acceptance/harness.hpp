#pragma once

#include <chrono>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

namespace apex::acceptance {

enum class Verdict { pass, fail, info };

struct Outcome {
  Verdict verdict = Verdict::fail;
  std::string summary;
};

struct Criterion {
  int number = 0;
  std::string title;
  std::function<Outcome()> run;
};

/// Detail line printed under the criterion currently running.
void note(const std::string& line);

template <class... Args>
std::string str(const Args&... args) {
  std::ostringstream out;
  out.precision(6);
  (out << ... << args);
  return out.str();
}

inline Outcome check(bool ok, std::string summary) {
  return {ok ? Verdict::pass : Verdict::fail, std::move(summary)};
}

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::vector<Criterion> retrieval_criteria();   // 1, 2, 6, 9
std::vector<Criterion> training_criteria();    // 3, 4, 5
std::vector<Criterion> baseline_criteria();    // 7, 8
std::vector<Criterion> determinism_criteria(); // 10

}  // namespace apex::acceptance
