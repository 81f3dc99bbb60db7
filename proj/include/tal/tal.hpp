#pragma once

#include "tal/affine.hpp"
#include "tal/attack.hpp"
#include "tal/binio.hpp"
#include "tal/config.hpp"
#include "tal/dataset.hpp"
#include "tal/ensemble.hpp"
#include "tal/error.hpp"
#include "tal/experiment.hpp"
#include "tal/gradcheck.hpp"
#include "tal/gradient_source.hpp"
#include "tal/graph.hpp"
#include "tal/metrics.hpp"
#include "tal/model.hpp"
#include "tal/parallel.hpp"
#include "tal/projection.hpp"
#include "tal/report.hpp"
#include "tal/rng.hpp"
#include "tal/schedule.hpp"
#include "tal/spectral.hpp"
#include "tal/tensor.hpp"
#include "tal/train.hpp"
#include "tal/transforms.hpp"
#include "tal/weights_io.hpp"
#include "tal/zoo.hpp"
