// Copyright 2026 The COBRA-lite Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Shared helpers for the unit tests.

#pragma once

#include <cstdlib>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "cobra/autodiff.hpp"
#include "cobra/corpus.hpp"

namespace cobra::testing {

// Fresh per-test directory under $COBRA_TEST_TMP (or the system temp dir).
inline std::filesystem::path temp_dir(const std::string& name) {
  const char* env = std::getenv("COBRA_TEST_TMP");
  std::filesystem::path root = env ? env : std::filesystem::temp_directory_path() / "cobra_tests";
  const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
  std::filesystem::path p = root / (std::string(info->test_suite_name()) + "." + info->name() + "." + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline ad::Matrix random_matrix(ad::Index r, ad::Index c, std::mt19937_64& rng,
                                double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  ad::Matrix m(r, c);
  for (ad::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

// Worst relative error between tape gradients and central differences over
// every entry of every parameter. Entries agreeing to 1e-8 absolute count as
// exact, since finite differences cannot resolve true zeros any closer.
// `loss` must build a 1x1 value.
inline double max_grad_error(std::vector<ad::Parameter*> params,
                             const std::function<ad::Var(ad::Tape&)>& loss,
                             double step = 1e-6) {
  for (auto* p : params) p->zero_grad();
  {
    ad::Tape t;
    t.backward(loss(t));
  }
  auto eval = [&] {
    ad::Tape t(false);
    return loss(t).value()(0, 0);
  };
  double worst = 0.0;
  for (auto* p : params) {
    for (ad::Index i = 0; i < p->value.size(); ++i) {
      const double orig = p->value.data()[i];
      p->value.data()[i] = orig + step;
      const double up = eval();
      p->value.data()[i] = orig - step;
      const double down = eval();
      p->value.data()[i] = orig;
      const double num = (up - down) / (2.0 * step);
      const double ana = p->grad.data()[i];
      const double diff = std::abs(num - ana);
      if (diff < 1e-8) continue;
      worst = std::max(worst, diff / std::max(std::abs(num), std::abs(ana)));
    }
  }
  return worst;
}

inline corpus::Item make_item(const std::string& id, const std::string& title,
                              const std::string& brand = "acme") {
  return corpus::Item{id, {{"title", title}, {"brand", brand}}};
}

}  // namespace cobra::testing
