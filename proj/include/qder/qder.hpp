#pragma once

#include "qder/data_io.hpp"
#include "qder/diagnostics.hpp"
#include "qder/error.hpp"
#include "qder/evaluation.hpp"
#include "qder/hybrid.hpp"
#include "qder/interaction.hpp"
#include "qder/matrix.hpp"
#include "qder/parallel.hpp"
#include "qder/random.hpp"
#include "qder/synthetic.hpp"
#include "qder/trainer.hpp"
