#pragma once

// Small configurations shared by the training, checkpoint and CLI tests.

#include "pifield/data.hpp"
#include "pifield/training.hpp"

namespace pifield::testing {

inline TrainConfig tiny_config() {
  TrainConfig c;
  c.gen.depth = 2;
  c.gen.width = 8;
  c.gen.map_depth = 1;
  c.gen.map_width = 16;
  c.gen.z_dim = 8;
  c.gen.input_scale = 8;
  c.disc.resolutions = {4, 8};
  c.disc.width_mult = 0.02;
  c.disc.fade_iters = 2;
  c.render.samples = 4;
  c.render.depth_extent = 0.12;
  c.render.chunk_rays = 16;
  c.iterations = 10;
  c.stage_fractions = {0.5, 0.5};
  c.batch_initial = 4;
  c.batch_divisor = 2;
  c.min_effective_batch = 3;
  c.seed = 5;
  return c;
}

inline const Dataset& tiny_data() {
  static const Dataset d = [] {
    DatasetSpec s;
    s.resolution = 8;
    s.count = 20;
    s.seed = 3;
    return make_procedural_dataset(s);
  }();
  return d;
}

template <class T>
bool same_state(const TrainState<T>& a, const TrainState<T>& b) {
  return a.gen.field == b.gen.field && a.gen.mapping == b.gen.mapping && a.disc.params == b.disc.params &&
         a.ema_field.shadow == b.ema_field.shadow && a.ema_mapping.shadow == b.ema_mapping.shadow &&
         a.opt_disc.v == b.opt_disc.v && a.opt_field.v == b.opt_field.v && a.iter == b.iter &&
         a.disc.stage == b.disc.stage && a.disc.alpha == b.disc.alpha;
}

}  // namespace pifield::testing
