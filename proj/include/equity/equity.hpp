#pragma once

#include "equity/clustering.hpp"
#include "equity/embedding_io.hpp"
#include "equity/error.hpp"
#include "equity/gfl.hpp"
#include "equity/likelihood.hpp"
#include "equity/matrix.hpp"
#include "equity/pipeline.hpp"
#include "equity/projection.hpp"
#include "equity/trainer.hpp"
