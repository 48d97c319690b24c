#pragma once

#include "ucmr/bundle.hpp"
#include "ucmr/corpus.hpp"
#include "ucmr/dialog_engine.hpp"
#include "ucmr/dialog_policy.hpp"
#include "ucmr/encoder.hpp"
#include "ucmr/entailment_gan.hpp"
#include "ucmr/error.hpp"
#include "ucmr/evalharness.hpp"
#include "ucmr/nn.hpp"
#include "ucmr/question_gen.hpp"
#include "ucmr/segmentation.hpp"
#include "ucmr/service.hpp"
#include "ucmr/spectral_rules.hpp"
#include "ucmr/text.hpp"
