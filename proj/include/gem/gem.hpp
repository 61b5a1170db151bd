#pragma once

#include "gem/error.hpp"
#include "gem/io_util.hpp"
#include "gem/activation_store.hpp"
#include "gem/geometry.hpp"
#include "gem/detector.hpp"
#include "gem/stats.hpp"
#include "gem/ablation.hpp"
#include "gem/propagator.hpp"
#include "gem/controls.hpp"
#include "gem/relay.hpp"
#include "gem/study.hpp"
#include "gem/serialize.hpp"
#include "gem/parallel.hpp"
#include "gem/pipeline.hpp"
#include "gem/report.hpp"
