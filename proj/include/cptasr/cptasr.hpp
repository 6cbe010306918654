#pragma once

#include "cptasr/checkpoint.hpp"
#include "cptasr/corpus.hpp"
#include "cptasr/ctc.hpp"
#include "cptasr/errors.hpp"
#include "cptasr/eval.hpp"
#include "cptasr/manifest.hpp"
#include "cptasr/net.hpp"
#include "cptasr/optim.hpp"
#include "cptasr/parallel.hpp"
#include "cptasr/pipeline.hpp"
#include "cptasr/random.hpp"
#include "cptasr/run_config.hpp"
#include "cptasr/train.hpp"
