// quick probe binary
use icdt_core::codec::{reconstruction_rmse, train_codec, TinyAutoencoder};
use icdt_core::data::{generate_synthetic, image_to_tensor};
use icdt_core::Tensor;

fn imgs(count: usize, side: usize, seed: u64) -> Vec<Tensor<f32>> {
    let (pairs, _) = generate_synthetic(count, side, seed).unwrap();
    pairs.iter().map(|p| image_to_tensor(&p.reference)).collect()
}

fn main() {
    for (side, epochs) in [(64usize, 150usize), (64, 300)] {
        let train = imgs(48, side, 77);
        let heldout = imgs(16, side, 78);
        let mut ae = TinyAutoencoder::new(8, 4).unwrap();
        train_codec(&mut ae, &train, epochs, 5).unwrap();
        let rt = reconstruction_rmse(&ae, &train).unwrap();
        let rh = reconstruction_rmse(&ae, &heldout).unwrap();
        println!("side={side} epochs={epochs}: train {rt:.4} heldout {rh:.4}");
    }
}
