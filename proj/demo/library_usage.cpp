// Trains a small ITS system in-process on synthetic data and prints the UME
// table. Runs in about a minute in a Release build.

#include <cstdio>

#include "iteach/iteach.hpp"

int main() {
  using namespace iteach;

  SynthSpec synth;
  synth.n_conversations = 60;
  synth.noise = 1.4;
  synth.seed = 1;
  const auto splits = split(generate_synthetic(synth).dataset, {0.6, 0.2, 0.2}, 2);

  RunSpec spec;
  spec.model.d_model = 32;
  spec.model.heads = 4;
  spec.framework = FrameworkSpec::its();
  spec.schedule = ScheduleSpec::progressive();
  spec.schedule.every = 2;
  spec.training.epochs = 12;

  const auto run = run_ume(spec, splits, [](const EpochLog& e) {
    std::printf("epoch %2zu  rate %.1f  loss %.4f  val WAF %.4f\n", e.epoch, e.rate, e.loss.total, e.val_waf);
  });
  for (const auto& row : run.report.per_rate) std::printf("rate %.1f  WAF %.4f\n", row.rate, row.waf);
  std::printf("average %.4f  decline %.4f  teacher (complete) %.4f\n", run.report.average, run.report.decline,
              *run.report.teacher_complete_waf);
}
