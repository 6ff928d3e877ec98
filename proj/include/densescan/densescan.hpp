#pragma once

#include "densescan/bench.hpp"
#include "densescan/convert.hpp"
#include "densescan/error.hpp"
#include "densescan/netspec.hpp"
#include "densescan/nn.hpp"
#include "densescan/oracle.hpp"
#include "densescan/parallel.hpp"
#include "densescan/random.hpp"
#include "densescan/tensor.hpp"
