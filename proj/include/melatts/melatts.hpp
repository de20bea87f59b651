#pragma once

#include "melatts/align.hpp"
#include "melatts/ar_core.hpp"
#include "melatts/audio/wav.hpp"
#include "melatts/config.hpp"
#include "melatts/diffusion.hpp"
#include "melatts/features.hpp"
#include "melatts/pipeline/checkpoint.hpp"
#include "melatts/pipeline/corpus.hpp"
#include "melatts/pipeline/plot.hpp"
#include "melatts/pipeline/synth.hpp"
#include "melatts/pipeline/train.hpp"
#include "melatts/sequence.hpp"
#include "melatts/streaming.hpp"
#include "melatts/tokenizer.hpp"
