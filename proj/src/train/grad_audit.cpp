#include "mad/train/grad_audit.hpp"

#include <algorithm>

#include "mad/numerics/grad_check.hpp"
#include "mad/train/experiment.hpp"

namespace mad::train {

bool GradAudit::passed(double tolerance) const {
  return std::all_of(terms.begin(), terms.end(), [&](const TermError& t) { return t.max_error < tolerance; });
}

GradAudit gradient_audit(std::size_t instances, std::uint64_t seed, std::size_t coords_per_param) {
  data::TaskSpec world;
  world.train_per_category = std::max<std::size_t>(2, (instances + 6) / 7);
  world.val_per_category = 1;
  world.test_per_category = 1;
  const auto splits = data::generate_task(world, mix_seed(seed, "grad-audit-data"));
  const auto stats = pairing_stats(splits.train);

  models::TowerConfig tower;
  tower.body = {8, 1, 2, 2};
  tower.out_dim = 6;
  auto vision = std::make_shared<models::VisionTower>(world, tower, models::TowerKind::Contrastive,
                                                      mix_seed(seed, "grad-audit-vision"));
  auto text = std::make_shared<models::TextTower>(world, tower, models::TowerKind::Contrastive,
                                                  mix_seed(seed, "grad-audit-text"));
  vision->params().set_frozen(true);
  text->params().set_frozen(true);
  TeacherPair sharp{vision, text, 1e-3};
  TeacherPair plain{vision, text};

  models::StudentConfig sc;
  sc.body = {8, 1, 2, 2};
  sc.teacher_dim = tower.out_dim;
  Student student(world, sc, mix_seed(seed, "grad-audit-student"));
  const auto params = student.params().pointers();

  distill::DistillationConfig full;
  const std::vector<std::string> names = {"L_t", "L_d_v", "L_d_t", "L_dt_prime", "L_adapt", "L_final"};
  GradAudit audit;
  for (const auto& n : names) audit.terms.push_back({n, 0.0});
  const auto& pool = splits.train.instances;
  instances = std::min(instances, pool.size());
  audit.instances = instances;

  for (std::size_t i = 0; i < instances; ++i) {
    const auto& inst = pool[i];
    TeacherPair& teacher = i % 2 == 0 ? sharp : plain;
    const auto tout = models::teacher_encode(teacher, inst);

    // Selections are fixed at the unperturbed point so the selected-token
    // term is a smooth function of the weights.
    std::vector<std::vector<std::size_t>> picks;
    {
      Tape tape;
      const auto s = student.encode(tape, inst);
      picks = distill::mad_loss(tape, student, cross_entropy(s.logits, inst.gold), inst, tout, s, full, stats)
                  .selected;
    }
    const data::Instance* batch[] = {&inst, &pool[(i + 1) % pool.size()], &pool[(i + 2) % pool.size()]};

    auto term = [&](std::size_t which, Tape& tape) -> Var {
      if (which == 4) {
        Rng rng(mix_seed(seed + i, "grad-audit-mask"));
        const auto l = l_adapt_losses(tape, student, batch, rng, 0.3);
        return add(l.mlm, l.itm);
      }
      const auto s = student.encode(tape, inst);
      Var task = cross_entropy(s.logits, inst.gold);
      if (which == 0) return task;
      if (which == 5) return distill::mad_loss(tape, student, task, inst, tout, s, full, stats).total;
      if (which == 3) {
        Var tokens = student.project_to_teacher(tape, s.batch.tokens);
        std::vector<Var> per_pair;
        for (std::size_t k = 0; k < inst.candidates.size(); ++k) {
          const std::size_t begin = s.batch.token_offsets[k];
          Var mine = slice_rows(tokens, begin, s.batch.token_offsets[k + 1] - begin);
          per_pair.push_back(distill::selected_token_loss(tape.constant(tout.tokens[k]), mine, picks[k]));
        }
        return mean(stack(per_pair));
      }
      const auto md = distill::md_loss(tape, tout, student.project_to_teacher(tape, s.batch.img),
                                       student.project_to_teacher(tape, s.batch.cls));
      return which == 1 ? md.vision : md.text;
    };
    for (std::size_t t = 0; t < names.size(); ++t) {
      GradCheckOptions opts;
      opts.max_coords_per_param = coords_per_param;
      opts.seed = mix_seed(seed + i, names[t]);
      const double err = finite_difference_check([&](Tape& tape) { return term(t, tape); }, params, opts);
      audit.terms[t].max_error = std::max(audit.terms[t].max_error, err);
    }
  }
  return audit;
}

}  // namespace mad::train
