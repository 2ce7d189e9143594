#pragma once

#include "qpat/edge_detect.hpp"
#include "qpat/error.hpp"
#include "qpat/estimate.hpp"
#include "qpat/fem.hpp"
#include "qpat/geometry.hpp"
#include "qpat/labeling.hpp"
#include "qpat/phantom.hpp"
#include "qpat/pipeline.hpp"
#include "qpat/scale_space.hpp"
#include "qpat/segment.hpp"
#include "qpat/volume.hpp"
