mod common;

use common::*;

#[test]
fn conv2d_matches_loop_oracle() {
    conv_equivalence(20).unwrap();
}

#[test]
fn attention_matches_softmax_oracle() {
    attention_equivalence(20).unwrap();
}

#[test]
fn cost_volume_matches_dot_product_oracle() {
    cost_volume_equivalence(20).unwrap();
}

#[test]
fn decode_cost_feature_matches_brute_force_oracle() {
    decoder_equivalence(20).unwrap();
}
