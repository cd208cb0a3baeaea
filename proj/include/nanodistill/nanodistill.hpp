#pragma once

// Everything at once.

#include "nanodistill/error.hpp"
#include "nanodistill/util.hpp"
#include "nanodistill/linalg.hpp"
#include "nanodistill/tokenizer.hpp"
#include "nanodistill/nanomodel.hpp"
#include "nanodistill/checkpoint.hpp"
#include "nanodistill/lora.hpp"
#include "nanodistill/optim.hpp"
#include "nanodistill/distill.hpp"
#include "nanodistill/gptq.hpp"
#include "nanodistill/hpo.hpp"
#include "nanodistill/dataget.hpp"
#include "nanodistill/tasks.hpp"
#include "nanodistill/evalbench.hpp"
#include "nanodistill/pipeline.hpp"
