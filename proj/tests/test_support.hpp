#pragma once

// c10 logging defines its own CHECK; doctest's takes precedence in tests.
#include <torch/torch.h>
#undef CHECK
#include <doctest.h>
