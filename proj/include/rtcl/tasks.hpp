#pragma once

#include <vector>

#include "rtcl/dataset.hpp"
#include "rtcl/rng.hpp"

namespace rtcl {

enum class TaskMode { Split, Permutation };

struct TaskSpec {
    int id = 0;
    TaskMode mode = TaskMode::Split;
    std::vector<int> class_ids;   // split: disjoint subset; permutation: full set
    std::vector<int> perm;        // permutation mode only; empty means identity
    std::vector<int> train_idx;   // into the train dataset
    std::vector<int> test_idx;    // into the test dataset
};

// Seeded random partition of the classes into n_tasks equal disjoint subsets.
std::vector<TaskSpec> make_splits(const Dataset& train, const Dataset& test,
                                  const std::vector<int>& classes, int n_tasks, Rng& rng);

// One fixed pixel permutation per task over the full label set. Task 0 can be
// pinned to the identity permutation.
std::vector<TaskSpec> make_permutations(const Dataset& train, const Dataset& test, int n_tasks,
                                        bool first_identity, Rng& rng);

std::vector<int> random_permutation(int n, Rng& rng);

}  // namespace rtcl
