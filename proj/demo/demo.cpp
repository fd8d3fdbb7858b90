// Library walk-through: generate a small dataset, train the full objective
// for a few epochs and score the result.

#include <iostream>

#include "eees/eees.hpp"

int main() {
  eees::GeneratorConfig gen;
  gen.n_identities_train = 16;
  gen.n_identities_test = 8;
  gen.seed = 7;
  auto ds = eees::generate_dataset(gen);

  eees::TrainConfig tc;
  tc.epochs = 6;
  tc.decay_epochs = eees::TrainConfig::default_decay_epochs(tc.epochs);
  tc.seed = 7;
  auto res = eees::run_training(tc, ds, [](const eees::EpochSnapshot& s) {
    std::cout << "epoch " << s.epoch << "  loss " << s.mean_l_total << "  rank1 " << s.rank1
              << "\n";
  });

  for (auto shots : {eees::Shots::Single, eees::Shots::Multi}) {
    eees::Protocol p{eees::Modality::R, eees::Modality::V, shots, 7};
    auto rep = eees::evaluate(res.params, ds.test, p, &ds);
    std::cout << p.name() << "  rank1 " << rep.rank(1) << "  mAP " << rep.map << "  gap ratio "
              << rep.gap.gap_ratio << "  conflict sensitivity " << *rep.conflict_sensitivity
              << "\n";
  }
}
