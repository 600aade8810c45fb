// Copyright 2026 The knnlm Authors.
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

#pragma once

#include "knnlm/adaptive.hpp"
#include "knnlm/analysis.hpp"
#include "knnlm/base_lm.hpp"
#include "knnlm/binary_io.hpp"
#include "knnlm/corpus.hpp"
#include "knnlm/datastore.hpp"
#include "knnlm/encoder.hpp"
#include "knnlm/error.hpp"
#include "knnlm/eval_cache.hpp"
#include "knnlm/hash.hpp"
#include "knnlm/ngram_filter.hpp"
#include "knnlm/parallel.hpp"
#include "knnlm/pipeline.hpp"
#include "knnlm/scorer.hpp"
#include "knnlm/synth.hpp"
