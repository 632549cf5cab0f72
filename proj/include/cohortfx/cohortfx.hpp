/*
 * Copyright 2026 The cohortfx Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include "cohortfx/cohort.hpp"
#include "cohortfx/csv.hpp"
#include "cohortfx/error.hpp"
#include "cohortfx/estimation.hpp"
#include "cohortfx/glm.hpp"
#include "cohortfx/io.hpp"
#include "cohortfx/matching.hpp"
#include "cohortfx/pipeline.hpp"
#include "cohortfx/preprocess.hpp"
#include "cohortfx/rng.hpp"
#include "cohortfx/synth.hpp"
#include "cohortfx/version.hpp"
