#pragma once

#include "coexec/config.hpp"
#include "coexec/error.hpp"
#include "coexec/runtime.hpp"
#include "coexec/scheduler.hpp"
#include "coexec/shm_region.hpp"
#include "coexec/shmalloc.hpp"
#include "coexec/task.hpp"
#include "coexec/trace.hpp"
