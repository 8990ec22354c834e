#pragma once

#include "vsearch/codebook.hpp"
#include "vsearch/descriptor.hpp"
#include "vsearch/error.hpp"
#include "vsearch/evaluation.hpp"
#include "vsearch/filter_bank.hpp"
#include "vsearch/imaging.hpp"
#include "vsearch/index.hpp"
#include "vsearch/localiser.hpp"
#include "vsearch/pipeline.hpp"
#include "vsearch/service.hpp"
#include "vsearch/shards.hpp"
#include "vsearch/signature.hpp"
