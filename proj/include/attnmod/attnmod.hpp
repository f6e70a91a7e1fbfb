#pragma once

#include "attnmod/decoder.hpp"
#include "attnmod/engine.hpp"
#include "attnmod/error.hpp"
#include "attnmod/lexicon.hpp"
#include "attnmod/metrics.hpp"
#include "attnmod/model.hpp"
#include "attnmod/modulation.hpp"
#include "attnmod/sentence_attention.hpp"
#include "attnmod/tensor.hpp"
#include "attnmod/tokenizer.hpp"
#include "attnmod/toy_model.hpp"
#include "attnmod/trace.hpp"
#include "attnmod/types.hpp"
#include "attnmod/weights_io.hpp"
