//! Rough forward+backward timing for a small conv stack.

use maskfree_tensor::nn::Conv2d;
use maskfree_tensor::{Adam, AdamConfig, Graph, ParamBuilder, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut pb = ParamBuilder::new(&mut store, &mut rng);
    let c1 = Conv2d::new(&mut pb.pp("c1"), 4, 16, 3, 1, 1);
    let c2 = Conv2d::new(&mut pb.pp("c2"), 16, 32, 3, 2, 1);
    let c3 = Conv2d::new(&mut pb.pp("c3"), 32, 32, 3, 1, 1);
    let c4 = Conv2d::new(&mut pb.pp("c4"), 32, 3, 3, 1, 1);
    let mut opt = Adam::new(AdamConfig::default());
    for s in [32usize, 64] {
        let x = Tensor::<f32>::full([16, 4, s, s], 0.5);
        let t0 = std::time::Instant::now();
        for _ in 0..10 {
            let grads = {
                let g = Graph::with_params(&store);
                let xv = g.constant(x.clone());
                let h = g.relu(c1.forward(&g, xv));
                let h = g.relu(c2.forward(&g, h));
                let h = g.relu(c3.forward(&g, h));
                let h = g.upsample(h, 2);
                let y = c4.forward(&g, h);
                let loss = g.mean_all(g.square(y));
                g.backward(loss)
            };
            opt.step(&mut store, &grads);
        }
        println!("{s}x{s}: {:?} per step", t0.elapsed() / 10);
    }
}
