#pragma once

#include "groklab/error.hpp"
#include "groklab/rng.hpp"
#include "groklab/tensor.hpp"
#include "groklab/data.hpp"
#include "groklab/models.hpp"
#include "groklab/checkpoint.hpp"
#include "groklab/losses.hpp"
#include "groklab/metrics.hpp"
#include "groklab/training.hpp"
#include "groklab/theory.hpp"
#include "groklab/lemma_verify.hpp"
#include "groklab/config.hpp"
#include "groklab/runlog.hpp"
#include "groklab/experiment.hpp"
#include "groklab/plot.hpp"
