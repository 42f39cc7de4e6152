#pragma once

#include "attrinet/error.hpp"
#include "attrinet/random.hpp"
#include "attrinet/image_io.hpp"
#include "attrinet/font.hpp"
#include "attrinet/dataset.hpp"
#include "attrinet/task_switch.hpp"
#include "attrinet/generator.hpp"
#include "attrinet/critic.hpp"
#include "attrinet/classifier.hpp"
#include "attrinet/losses.hpp"
#include "attrinet/guidance.hpp"
#include "attrinet/checkpoint.hpp"
#include "attrinet/model.hpp"
#include "attrinet/metrics.hpp"
#include "attrinet/trainer.hpp"
#include "attrinet/explain.hpp"
#include "attrinet/report.hpp"
#include "attrinet/config.hpp"
