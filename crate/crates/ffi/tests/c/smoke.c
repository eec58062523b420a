#include <stdio.h>
#include <string.h>

#include "latte.h"

int main(int argc, char **argv) {
    if (argc != 2) {
        return 64;
    }
    LatteCatalog *cat = NULL;
    if (latte_catalog_load(argv[1], &cat) != LATTE_STATUS_OK) {
        char msg[256];
        latte_last_error_message(msg, sizeof msg);
        fprintf(stderr, "%s\n", msg);
        return 1;
    }
    LatteForest *forest = NULL;
    if (latte_forest_new(cat, 0, false, &forest) != LATTE_STATUS_OK) {
        return 2;
    }
    size_t d = 0;
    if (latte_tree_distance(forest, -1, 0, 1, &d) != LATTE_STATUS_OK) {
        return 3;
    }
    LatteCatalog *missing = NULL;
    LatteStatus st = latte_catalog_load("/nonexistent.json", &missing);
    printf("items=%zu depth=%zu d01=%zu missing=%d ndcg3=%.3f\n", latte_catalog_len(cat),
           latte_catalog_depth(cat), d, (int)st, latte_ndcg_at_rank(3, 10));
    latte_forest_free(forest);
    latte_catalog_free(cat);
    return 0;
}
