#ifndef MCRECON_MCRECON_HPP_
#define MCRECON_MCRECON_HPP_

#include "mcrecon/error.hpp"
#include "mcrecon/numerics.hpp"
#include "mcrecon/forward_model.hpp"
#include "mcrecon/gaussian_prior.hpp"
#include "mcrecon/score_network.hpp"
#include "mcrecon/priors.hpp"
#include "mcrecon/sampler.hpp"
#include "mcrecon/metrics.hpp"
#include "mcrecon/phantoms.hpp"
#include "mcrecon/config.hpp"
#include "mcrecon/experiment.hpp"
#include "mcrecon/pipeline.hpp"

#endif  // MCRECON_MCRECON_HPP_
