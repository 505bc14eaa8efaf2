#pragma once

#include "eeve/checkpoint.hpp"
#include "eeve/corpus.hpp"
#include "eeve/embed_init.hpp"
#include "eeve/error.hpp"
#include "eeve/eval.hpp"
#include "eeve/hash.hpp"
#include "eeve/io.hpp"
#include "eeve/lora.hpp"
#include "eeve/model.hpp"
#include "eeve/optim.hpp"
#include "eeve/pipeline.hpp"
#include "eeve/stages.hpp"
#include "eeve/tokenizer.hpp"
#include "eeve/trainer.hpp"
