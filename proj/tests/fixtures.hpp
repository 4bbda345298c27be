// Shared synthetic fixtures for the test suites.
#pragma once

#include <string>
#include <vector>

#include "kmi/frame.hpp"
#include "kmi/rng.hpp"

namespace fixtures {

// A 30-predictor mixed-type frame shaped like a large-scale assessment
// questionnaire: mostly binaries, a few 4- and 5-level ordinals, two 6-level
// unordered occupations and one 3-level origin variable, plus a cluster id
// (school), a 5-level stratum (area) and a continuous outcome.
inline kmi::MixedFrame assessment_frame(std::size_t n_students,
                                        std::size_t n_schools,
                                        std::uint64_t seed,
                                        double missing_rate = 0.0) {
  using namespace kmi;
  std::vector<VariableSpec> specs;
  auto bin = [&](const std::string& name) {
    specs.push_back({name, Scale::binary, 0, Role::predictor, {}});
  };
  auto ord = [&](const std::string& name, int K) {
    specs.push_back({name, Scale::ordinal, K, Role::predictor, {}});
  };
  auto nom = [&](const std::string& name, int K) {
    specs.push_back({name, Scale::nominal, K, Role::predictor, {}});
  };
  bin("male");
  ord("n_brothers", 5);
  ord("n_sisters", 5);
  bin("quiet_space");
  bin("computer");
  bin("personal_desk");
  bin("software");
  bin("internet");
  bin("personal_room");
  bin("classical_books");
  bin("artworks");
  bin("technical_manuals");
  bin("dictionary");
  bin("personal_tablet");
  bin("smartphone");
  ord("n_books", 5);
  bin("born_in_country");
  nom("immigrant_status", 3);
  bin("home_language");
  bin("dialect_at_home");
  bin("language_with_friends");
  bin("father_born_in_country");
  bin("mother_born_in_country");
  ord("father_education", 4);
  ord("mother_education", 4);
  nom("father_occupation", 6);
  nom("mother_occupation", 6);
  bin("nursery_school");
  bin("regular_student");
  bin("long_school_week");
  specs.push_back({"school", Scale::continuous, 0, Role::cluster_id, {}});
  specs.push_back({"area", Scale::nominal, 5, Role::stratum, {}});
  specs.push_back({"score", Scale::continuous, 0, Role::outcome, {}});

  MixedFrame f(specs, n_students);
  Rng rng(seed);
  const std::size_t p = 30;
  for (std::size_t i = 0; i < n_students; ++i) {
    double latent = rng.normal();  // family background factor
    double y = 190.0;
    for (std::size_t j = 0; j < p; ++j) {
      const auto& s = specs[j];
      double v = 0.0;
      if (s.scale == Scale::binary) {
        double pr = 1.0 / (1.0 + std::exp(-(0.8 * latent + rng.normal())));
        v = rng.bernoulli(pr) ? 1.0 : 0.0;
        y += (j % 3 == 0 ? 3.0 : 0.0) * v;
      } else {
        int K = s.levels;
        double z = 0.6 * latent + rng.normal();
        int cat = 1 + static_cast<int>(std::floor(
                          (z + 3.0) / 6.0 * static_cast<double>(K)));
        v = static_cast<double>(std::clamp(cat, 1, K));
        if (s.scale == Scale::ordinal) y += 1.5 * v;
      }
      f.set_value(i, j, v);
    }
    std::size_t school = i % n_schools;
    f.set_value(i, p, static_cast<double>(school + 1));
    f.set_value(i, p + 1, static_cast<double>(1 + school % 5));
    y += 4.0 * rng.normal();  // includes no school effect by default
    f.set_value(i, p + 2, y);
  }
  if (missing_rate > 0.0) {
    for (std::size_t j = 1; j < p; ++j)  // first predictor stays complete
      for (std::size_t i = 0; i < n_students; ++i)
        if (rng.bernoulli(missing_rate)) f.set_missing(i, j, true);
  }
  return f;
}

}  // namespace fixtures
